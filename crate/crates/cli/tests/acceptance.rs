//! Acceptance suite: one test per release criterion, each printing a
//! PASS / SKIPPED line (run with `--nocapture` to see them). Criteria that
//! need externally supplied datasets (MUSK-1 CSV, MNIST IDX files) report
//! SKIPPED when the files are absent; see the README for where to put them.
//!
//! Recommended invocation:
//!   cargo test -p milrank-cli --test acceptance -- --nocapture --test-threads=1

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use milrank::data::{gen_synthetic, load_bag_csv, load_mnist_idx, make_mnist_bags};
use milrank::eval::{accuracy, auc_roc, run_cv};
use milrank::mil::{
    bag_score, empirical_risk, pair_loss, pair_step, score_instances, train, Bag, TrainConfig,
};
use milrank::model::{init_params, ModelSpec, Parameters};
use milrank::tensor::Tensor;
use milrank::BagLabel;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root exists")
}

fn musk1_path() -> PathBuf {
    std::env::var_os("MILRANK_MUSK1_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/musk1.csv"))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MILRANK_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

fn mnist_files() -> Option<[PathBuf; 4]> {
    let dir = mnist_dir();
    let files = [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    ];
    files.iter().all(|f| f.exists()).then_some(files)
}

fn report(name: &str, status: &str) {
    println!("ACCEPTANCE {name}: {status}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

// Criterion 1: end-to-end analytic gradients of the pair loss match central
// finite differences (h = 1e-5) within relative error 1e-4 on at least 5
// seeds per architecture, at points with an active hinge and unique bag
// argmaxes. Runtime under one minute.
#[test]
fn criterion_gradient_correctness() {
    let started = Instant::now();
    let h = 1e-5;
    for spec in [
        ModelSpec::SingleLinear { input_dim: 7 },
        ModelSpec::OneHiddenTanh { input_dim: 7 },
        ModelSpec::MnistCnn,
    ] {
        let mut valid_seeds = 0;
        let mut seed = 0u64;
        while valid_seeds < 5 {
            assert!(seed < 50, "{spec:?}: not enough usable seeds");
            let this_seed = seed;
            seed += 1;

            let mut rng = ChaCha8Rng::seed_from_u64(this_seed);
            let theta = init_params(&spec, this_seed);
            let shape = spec.input_shape();
            let n: usize = shape.iter().product();
            let mut make_bag = |id: &str, label| {
                let instances = (0..2)
                    .map(|_| {
                        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                        Tensor::from_vec(&shape, v).unwrap()
                    })
                    .collect();
                Bag::new(id, label, instances).unwrap()
            };
            let pos = make_bag("p", BagLabel::Positive);
            let neg = make_bag("n", BagLabel::Negative);

            // Require an active hinge away from the kink and unique argmaxes.
            let step = pair_step(&spec, &theta, &pos, &neg).unwrap();
            if step.loss < 1e-3 || step.grad.is_none() {
                continue;
            }
            let unique = |bag: &Bag| {
                let mut s = score_instances(&spec, &theta, bag).unwrap();
                s.sort_by(f64::total_cmp);
                s[s.len() - 1] - s[s.len() - 2] > 1e-3
            };
            if !unique(&pos) || !unique(&neg) {
                continue;
            }
            valid_seeds += 1;
            let grad = step.grad.unwrap();

            let coords: Vec<usize> = if spec.num_params() <= 2_000 {
                (0..spec.num_params()).collect()
            } else {
                let mut c: Vec<usize> =
                    (0..40).map(|_| rng.random_range(0..spec.num_params())).collect();
                c.extend([0, 520, 25_569, 425_619, 426_069, 426_570]);
                c.sort_unstable();
                c.dedup();
                c
            };
            let loss_at = |t: &Parameters| {
                let sp = bag_score(&spec, t, &pos).unwrap().0;
                let sn = bag_score(&spec, t, &neg).unwrap().0;
                pair_loss(sp, sn)
            };
            for j in coords {
                let mut plus = theta.theta().to_vec();
                plus[j] += h;
                let mut minus = theta.theta().to_vec();
                minus[j] -= h;
                let fd = (loss_at(&Parameters::new(&spec, plus).unwrap())
                    - loss_at(&Parameters::new(&spec, minus).unwrap()))
                    / (2.0 * h);
                if grad[j].abs() < 1e-8 && fd.abs() < 1e-8 {
                    continue; // below the finite-difference noise floor
                }
                assert!(
                    rel_err(grad[j], fd) < 1e-4,
                    "{spec:?} seed {this_seed} coord {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
    report("gradient_correctness", "PASS");
}

// Criterion 2: loss/score property suite. Runtime under one minute.
#[test]
fn criterion_loss_score_properties() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // pair_loss nonnegativity, zero-iff-margin, translation invariance.
    for _ in 0..2_000 {
        let sp: f64 = rng.random_range(-5.0..5.0);
        let sn: f64 = rng.random_range(-5.0..5.0);
        let c: f64 = rng.random_range(-50.0..50.0);
        let loss = pair_loss(sp, sn);
        assert!(loss >= 0.0);
        assert_eq!(loss == 0.0, sp - sn >= 0.5);
        assert!((pair_loss(sp + c, sn + c) - loss).abs() < 1e-9);
    }

    // bag_score permutation invariance (identity scorer over scalars).
    let spec = ModelSpec::SingleLinear { input_dim: 1 };
    let theta = Parameters::new(&spec, vec![1.0, 0.0]).unwrap();
    for _ in 0..200 {
        let k = rng.random_range(1..12);
        let values: Vec<f64> = (0..k).map(|_| rng.random_range(-9.0..9.0)).collect();
        let bag_of = |vals: &[f64]| {
            Bag::new(
                "b",
                BagLabel::Positive,
                vals.iter()
                    .map(|&v| Tensor::from_vec(&[1], vec![v]).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let (s1, _) = bag_score(&spec, &theta, &bag_of(&values)).unwrap();
        let mut rotated = values.clone();
        rotated.rotate_left(rng.random_range(0..k));
        let (s2, _) = bag_score(&spec, &theta, &bag_of(&rotated)).unwrap();
        assert_eq!(s1, s2);
    }

    // empirical_risk equals brute-force pair enumeration up to 10x10.
    for _ in 0..30 {
        let n_pos = rng.random_range(1..=10);
        let n_neg = rng.random_range(1..=10);
        let pos: Vec<f64> = (0..n_pos).map(|_| rng.random_range(-2.0..2.0)).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut bags = Vec::new();
        for (i, &v) in pos.iter().enumerate() {
            bags.push(
                Bag::new(
                    format!("p{i}"),
                    BagLabel::Positive,
                    vec![Tensor::from_vec(&[1], vec![v]).unwrap()],
                )
                .unwrap(),
            );
        }
        for (i, &v) in neg.iter().enumerate() {
            bags.push(
                Bag::new(
                    format!("n{i}"),
                    BagLabel::Negative,
                    vec![Tensor::from_vec(&[1], vec![v]).unwrap()],
                )
                .unwrap(),
            );
        }
        let got = empirical_risk(&spec, &theta, &bags).unwrap();
        let mut expect = 0.0;
        for &p in &pos {
            for &n in &neg {
                expect += (1.0 - 2.0 * (p - n)).max(0.0);
            }
        }
        assert!((got - expect).abs() < 1e-12);
    }

    // auc_roc equals brute-force pair counting on 200 random instances.
    let scores: Vec<f64> = (0..200)
        .map(|_| (rng.random_range(-20..=20) as f64) / 4.0)
        .collect();
    let labels: Vec<BagLabel> = (0..200)
        .map(|i| {
            if i < 2 {
                [BagLabel::Positive, BagLabel::Negative][i]
            } else if rng.random_bool(0.4) {
                BagLabel::Positive
            } else {
                BagLabel::Negative
            }
        })
        .collect();
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (sp, lp) in scores.iter().zip(&labels) {
        if !lp.is_positive() {
            continue;
        }
        for (sn, ln) in scores.iter().zip(&labels) {
            if ln.is_positive() {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    let brute = wins / pairs;
    let got = auc_roc(&scores, &labels).unwrap();
    assert!((got - brute).abs() < 1e-12, "{got} vs {brute}");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
    report("loss_score_properties", "PASS");
}

// Criterion 3: separable oracle end to end. Runtime under 30 seconds.
#[test]
fn criterion_separable_oracle() {
    let started = Instant::now();
    let train_set = gen_synthetic(50, 50, 10, 20.0, 1.0, 7).unwrap();
    let spec = ModelSpec::SingleLinear { input_dim: 10 };
    let cfg = TrainConfig::defaults_for(
        &spec,
        train_set.num_positive(),
        train_set.num_negative(),
        7,
    );
    let model = train(train_set.bags(), &spec, &cfg).unwrap();

    let test_set = gen_synthetic(50, 50, 10, 20.0, 1.0, 7007).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in test_set.bags() {
        scores.push(model.score_bag(bag).unwrap().0);
        labels.push(bag.label());
    }
    assert_eq!(auc_roc(&scores, &labels).unwrap(), 1.0);
    assert_eq!(accuracy(&scores, &labels, model.threshold).unwrap(), 1.0);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
    report("separable_oracle", "PASS");
}

// Criterion 4: MUSK-1 reproduction, 5x10-fold CV with SingleLinear defaults:
// accuracy_mean >= 0.85, across-runs std <= 0.05, under 10 minutes. Reported
// SKIPPED when the user-supplied CSV is absent.
#[test]
fn criterion_musk1_reproduction() {
    let path = musk1_path();
    if !path.exists() {
        report(
            "musk1_reproduction",
            &format!("SKIPPED (no dataset at {})", path.display()),
        );
        return;
    }
    let started = Instant::now();
    let dataset = load_bag_csv(&path).unwrap();
    let spec = ModelSpec::SingleLinear {
        input_dim: dataset.feature_dim(),
    };
    let cfg = TrainConfig::defaults_for(
        &spec,
        dataset.num_positive(),
        dataset.num_negative(),
        0,
    );
    let report_cv = run_cv(&dataset, &spec, &cfg, 5, 10).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        report_cv.accuracy_mean >= 0.85,
        "accuracy_mean {}",
        report_cv.accuracy_mean
    );
    assert!(
        report_cv.accuracy_std <= 0.05,
        "accuracy_std {}",
        report_cv.accuracy_std
    );
    assert!(elapsed < 600.0, "took {elapsed:.1}s");
    report(
        "musk1_reproduction",
        &format!(
            "PASS (accuracy {:.3} +- {:.3}, auc {:.3})",
            report_cv.accuracy_mean, report_cv.accuracy_std, report_cv.auc_mean
        ),
    );
}

fn mnist_bag_auc_for_seed(
    files: &[PathBuf; 4],
    train_bags: usize,
    seed: u64,
) -> (f64, milrank::TrainedModel, milrank::data::MnistBags) {
    let train_pool = load_mnist_idx(&files[0], &files[1]).unwrap();
    let test_pool = load_mnist_idx(&files[2], &files[3]).unwrap();
    let made_train = make_mnist_bags(&train_pool, train_bags, 10.0, 2.0, 0.5, seed).unwrap();
    let made_test = make_mnist_bags(&test_pool, 1000, 10.0, 2.0, 0.5, seed + 1).unwrap();

    let spec = ModelSpec::MnistCnn;
    let cfg = TrainConfig::defaults_for(
        &spec,
        made_train.dataset.num_positive(),
        made_train.dataset.num_negative(),
        seed,
    );
    let model = train(made_train.dataset.bags(), &spec, &cfg).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in made_test.dataset.bags() {
        scores.push(model.score_bag(bag).unwrap().0);
        labels.push(bag.label());
    }
    (auc_roc(&scores, &labels).unwrap(), model, made_test)
}

// Criterion 5: MNIST-bags small-data claim: 100 training bags, CNN defaults,
// test AUC on 1000 bags >= 0.90 averaged over 3 seeds, under 30 minutes.
// Reported SKIPPED when the IDX files are absent.
#[test]
fn criterion_mnist_bags_small_data() {
    let Some(files) = mnist_files() else {
        report(
            "mnist_bags_small_data",
            &format!("SKIPPED (no MNIST IDX files under {})", mnist_dir().display()),
        );
        return;
    };
    let started = Instant::now();
    let mut aucs = Vec::new();
    for seed in [0, 1, 2] {
        let (auc, _, _) = mnist_bag_auc_for_seed(&files, 100, seed);
        aucs.push(auc);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let elapsed = started.elapsed().as_secs_f64();
    assert!(mean >= 0.90, "mean AUC {mean} over seeds {aucs:?}");
    assert!(elapsed < 1_800.0, "took {elapsed:.1}s");
    report(
        "mnist_bags_small_data",
        &format!("PASS (mean AUC {mean:.4} over {aucs:?})"),
    );
}

// Extended, non-gating check for the 500-bag point (target AUC >= 0.96).
// Run explicitly with `--ignored` when MNIST files are available.
#[test]
#[ignore = "extended check; run with --ignored when MNIST IDX files are present"]
fn extended_mnist_bags_500() {
    let Some(files) = mnist_files() else {
        report("extended_mnist_bags_500", "SKIPPED (no MNIST IDX files)");
        return;
    };
    let (auc, _, _) = mnist_bag_auc_for_seed(&files, 500, 0);
    assert!(auc >= 0.96, "AUC {auc}");
    report("extended_mnist_bags_500", &format!("PASS (AUC {auc:.4})"));
}

// Criterion 6: qualitative instance-score reproduction on MNIST bags: within
// positive test bags, digit-9 instances outscore non-9 instances on average,
// and the best positive bag outscores at least 90% of negative bags.
// Reported SKIPPED when the IDX files are absent.
#[test]
fn criterion_instance_score_separation() {
    let Some(files) = mnist_files() else {
        report(
            "instance_score_separation",
            &format!("SKIPPED (no MNIST IDX files under {})", mnist_dir().display()),
        );
        return;
    };
    let (_, model, made_test) = mnist_bag_auc_for_seed(&files, 100, 0);
    let truth = made_test.dataset.instance_truth().unwrap();

    let mut nine_scores = Vec::new();
    let mut other_scores = Vec::new();
    let mut max_pos = f64::NEG_INFINITY;
    let mut neg_maxima = Vec::new();
    for (bag, digits) in made_test.dataset.bags().iter().zip(truth) {
        let (bag_max, _) = model.score_bag(bag).unwrap();
        if bag.label().is_positive() {
            max_pos = max_pos.max(bag_max);
            for (s, d) in model.score_instances(bag).unwrap().iter().zip(digits) {
                if *d == 9 {
                    nine_scores.push(*s);
                } else {
                    other_scores.push(*s);
                }
            }
        } else {
            neg_maxima.push(bag_max);
        }
    }
    let mean9 = nine_scores.iter().sum::<f64>() / nine_scores.len() as f64;
    let mean_other = other_scores.iter().sum::<f64>() / other_scores.len() as f64;
    assert!(
        mean9 > mean_other,
        "mean digit-9 score {mean9} vs non-9 {mean_other}"
    );
    let beaten = neg_maxima.iter().filter(|&&m| max_pos > m).count();
    let fraction = beaten as f64 / neg_maxima.len() as f64;
    assert!(fraction >= 0.9, "best positive bag beats only {fraction:.2} of negatives");
    report(
        "instance_score_separation",
        &format!("PASS (9s {mean9:.3} vs non-9s {mean_other:.3}, beats {fraction:.2})"),
    );
}

// Criterion 7: determinism. Any command rerun with an identical manifest
// produces byte-identical model and report files.
#[test]
fn criterion_determinism() {
    fn milrank_bin(args: &[&str], cwd: &Path) {
        let out = Command::new(env!("CARGO_BIN_EXE_milrank"))
            .args(args)
            .current_dir(cwd)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(8, 8, 3, 5.0, 0.8, 4).unwrap();
    milrank::data::save_bag_csv(&ds, dir.path().join("data.csv")).unwrap();

    // train: fresh invocation and manifest-driven rerun both reproduce bytes.
    let train_args = [
        "train", "--data", "data.csv", "--arch", "linear", "--out", "model.json",
        "--epochs", "25", "--seed", "6",
    ];
    milrank_bin(&train_args, dir.path());
    let model_bytes = std::fs::read(dir.path().join("model.json")).unwrap();
    milrank_bin(&train_args, dir.path());
    assert_eq!(std::fs::read(dir.path().join("model.json")).unwrap(), model_bytes);
    std::fs::remove_file(dir.path().join("model.json")).unwrap();
    milrank_bin(&["rerun", "--manifest", "model.manifest.json"], dir.path());
    assert_eq!(std::fs::read(dir.path().join("model.json")).unwrap(), model_bytes);

    // cv: report files are byte-identical across reruns.
    let cv_args = [
        "cv", "--data", "data.csv", "--arch", "linear", "--report", "rep",
        "--runs", "2", "--folds", "3", "--epochs", "10", "--seed", "1",
    ];
    milrank_bin(&cv_args, dir.path());
    let csv_bytes = std::fs::read(dir.path().join("rep.csv")).unwrap();
    let json_bytes = std::fs::read(dir.path().join("rep.json")).unwrap();
    milrank_bin(&["rerun", "--manifest", "rep.manifest.json"], dir.path());
    assert_eq!(std::fs::read(dir.path().join("rep.csv")).unwrap(), csv_bytes);
    assert_eq!(std::fs::read(dir.path().join("rep.json")).unwrap(), json_bytes);

    // mnist-bags: generated manifests are byte-identical across reruns.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    images.extend_from_slice(&30u32.to_be_bytes());
    images.extend_from_slice(&4u32.to_be_bytes());
    images.extend_from_slice(&4u32.to_be_bytes());
    labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    labels.extend_from_slice(&30u32.to_be_bytes());
    for i in 0..30u8 {
        for _ in 0..16 {
            images.push(rng.random_range(0..=255));
        }
        labels.push(if i % 3 == 0 { 9 } else { i % 9 });
    }
    std::fs::write(dir.path().join("imgs"), images).unwrap();
    std::fs::write(dir.path().join("lbls"), labels).unwrap();
    let bag_args = [
        "mnist-bags", "--images", "imgs", "--labels", "lbls", "--train-bags", "4",
        "--test-bags", "3", "--mean-size", "3", "--variance", "0.5", "--seed", "8",
        "--out-dir", "bags",
    ];
    milrank_bin(&bag_args, dir.path());
    let train_bytes = std::fs::read(dir.path().join("bags/train_bags.json")).unwrap();
    let test_bytes = std::fs::read(dir.path().join("bags/test_bags.json")).unwrap();
    milrank_bin(&["rerun", "--manifest", "bags/manifest.json"], dir.path());
    assert_eq!(
        std::fs::read(dir.path().join("bags/train_bags.json")).unwrap(),
        train_bytes
    );
    assert_eq!(
        std::fs::read(dir.path().join("bags/test_bags.json")).unwrap(),
        test_bytes
    );

    // score: output CSV is byte-identical across reruns.
    let score_args = [
        "score", "--model", "model.json", "--data", "data.csv", "--per-instance",
        "--out", "scores.csv",
    ];
    milrank_bin(&score_args, dir.path());
    let score_bytes = std::fs::read(dir.path().join("scores.csv")).unwrap();
    milrank_bin(&["rerun", "--manifest", "scores.manifest.json"], dir.path());
    assert_eq!(std::fs::read(dir.path().join("scores.csv")).unwrap(), score_bytes);

    report("determinism", "PASS");
}
