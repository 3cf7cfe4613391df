//! Experiment runners: each takes a validated configuration, produces its
//! artifacts in the output directory, and reports them for the manifest.

use crate::config::{CliError, CliResult, ExperimentConfig, ExperimentKind};
use std::fs;
use std::time::Instant;
use tmdlab::gradcheck::check_layer_gradients;
use tmdlab::kernel::{gaussian_kernel, kde};
use tmdlab::layer::{HeadKind, KernelSource, TmdLayerParams};
use tmdlab::models::classifier::{classifier_forward, TmdSettings};
use tmdlab::models::data::shape_image;
use tmdlab::models::levelset::{
    chanvese_advance, chanvese_tmd_step, iou, pooled_features, ChanVeseCoefficients,
    LevelSetState, POOL_TARGET,
};
use tmdlab::models::train::{
    classifier_overhead_fraction, train_classifier,
    train_pointset, write_metrics_csv, ClassifierSpec, PointSetSpec,
};
use tmdlab::nn::{argmax_rows, median};
use tmdlab::operator::{build_tmd_operator, dump_operator, target_density, DensityHead};
use tmdlab::oracle::{convergence_sweep, write_sweep_csv, GeneratorSpec, TestFunction};
use tmdlab::params::{ParamStore, Recorder};
use tmdlab::report::{fmt_g17, write_mask_pgm, CsvWriter};
use tmdlab::rng::StreamRng;
use tmdlab::tensor::Tensor;

/// What a run produced, besides its exit status.
pub struct RunOutcome {
    /// Artifact names relative to the output directory.
    pub outputs: Vec<String>,
    /// True when the run itself succeeded but a verification failed
    /// (gradcheck); the process should exit nonzero.
    pub failed_checks: bool,
}

/// Execute one experiment: create the output directory, dispatch on the
/// kind, then write the effective config and the manifest (exactly one
/// per run).
pub fn run(config: &ExperimentConfig) -> CliResult<RunOutcome> {
    let start = Instant::now();
    fs::create_dir_all(&config.out_dir)?;

    let (mut outputs, failed_checks) = match config.kind {
        ExperimentKind::ValidateGenerator => (run_validate_generator(config)?, false),
        ExperimentKind::TrainClassifier => (run_train_classifier(config)?, false),
        ExperimentKind::TrainPointset => (run_train_pointset(config)?, false),
        ExperimentKind::Segment => (run_segment(config)?, false),
        ExperimentKind::Gradcheck => run_gradcheck(config)?,
        ExperimentKind::DumpOperator => (run_dump_operator(config)?, false),
    };

    fs::write(config.out_dir.join("effective_config.txt"), config.canonical_text())?;
    outputs.push("effective_config.txt".to_string());
    outputs.sort();

    let mut manifest = String::new();
    manifest.push_str(&format!("config_hash {}\n", config.hash_hex()));
    manifest.push_str(&format!("version {}\n", env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("duration_seconds {}\n", start.elapsed().as_secs_f64()));
    for name in &outputs {
        manifest.push_str(&format!("output {name}\n"));
    }
    fs::write(config.out_dir.join("manifest.txt"), manifest)?;

    Ok(RunOutcome { outputs, failed_checks })
}

pub fn parse_density(name: &str) -> CliResult<GeneratorSpec> {
    match name {
        "gaussian1d" => Ok(GeneratorSpec::gaussian(vec![0.0], 1.0)),
        "gaussian2d" => Ok(GeneratorSpec::gaussian(vec![0.0, 0.0], 1.0)),
        "mixture1d" => Ok(GeneratorSpec::mixture(
            [vec![-1.5], vec![1.5]],
            [0.5, 0.5],
            [0.5, 0.5],
        )),
        "mixture2d" => Ok(GeneratorSpec::mixture(
            [vec![-1.2, 0.0], vec![1.2, 0.0]],
            [0.5, 0.7],
            [0.5, 0.5],
        )),
        other => Err(CliError::Config {
            field: "density".into(),
            reason: format!("`{other}` is not a known density"),
        }),
    }
}

fn parse_test_function(name: &str) -> CliResult<TestFunction> {
    match name {
        "quadratic" => Ok(TestFunction::Quadratic),
        "coordinate" => Ok(TestFunction::Coordinate),
        "cosine" => Ok(TestFunction::Cosine),
        other => Err(CliError::Config {
            field: "test_function".into(),
            reason: format!("`{other}` is not a known test function"),
        }),
    }
}

fn run_validate_generator(config: &ExperimentConfig) -> CliResult<Vec<String>> {
    let spec = parse_density(config.get("density"))?;
    let f = parse_test_function(config.get("test_function"))?;
    let m_grid = config.get_list_usize("m_grid")?;
    let epsilon_grid = config.get_list_f64("epsilon_grid")?;
    let seeds = config.get_list_u64("seeds")?;
    if m_grid.is_empty() || epsilon_grid.is_empty() {
        return Err(CliError::Config {
            field: "m_grid".into(),
            reason: "grids must be nonempty".into(),
        });
    }

    let rows = convergence_sweep(&spec, f, &m_grid, &epsilon_grid, &seeds)?;
    let sweep_path = config.out_dir.join("sweep.csv");
    write_sweep_csv(&rows, fs::File::create(&sweep_path)?)?;

    // Per-(m, eps) medians across seeds, in grid order.
    let medians_path = config.out_dir.join("medians.csv");
    let mut csv = CsvWriter::new(
        fs::File::create(&medians_path)?,
        &["m", "epsilon", "median_max_err", "median_mean_err"],
    )?;
    for &m in &m_grid {
        for &eps in &epsilon_grid {
            let mut max_errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.m == m && r.epsilon == eps)
                .map(|r| r.max_err)
                .collect();
            let mut mean_errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.m == m && r.epsilon == eps)
                .map(|r| r.mean_err)
                .collect();
            if max_errs.is_empty() {
                continue;
            }
            csv.row(&[
                m.to_string(),
                fmt_g17(eps),
                fmt_g17(median(&mut max_errs)),
                fmt_g17(median(&mut mean_errs)),
            ])?;
        }
    }

    Ok(vec!["sweep.csv".to_string(), "medians.csv".to_string()])
}

pub fn classifier_spec_from(config: &ExperimentConfig) -> CliResult<ClassifierSpec> {
    Ok(ClassifierSpec {
        dataset: config.get_dataset("dataset")?,
        train_size: config.get_positive_usize("train_size")?,
        test_size: config.get_positive_usize("test_size")?,
        train_noise: config.get_nonnegative_f64("train_noise")?,
        augment_noise: config.get_nonnegative_f64("augment_noise")?,
        hidden_dim: config.get_positive_usize("hidden_dim")?,
        blocks: config.get_positive_usize("blocks")?,
        use_tmd: config.get_bool("use_tmd")?,
        tmd: TmdSettings {
            latent_dim: config.get_positive_usize("latent_dim")?,
            epsilon: config.get_epsilon_policy("epsilon")?,
            kernel_source: config.get_kernel_source("kernel_source")?,
            freeze_delta_t: config.get_bool("freeze_delta_t")?,
            delta_t_init: config.get_f64("delta_t")?,
        },
        batch_size: config.get_positive_usize("batch_size")?,
        epochs: config.get_usize("epochs")?,
        learning_rate: config.get_positive_f64("learning_rate")?,
        momentum: config.get_nonnegative_f64("momentum")?,
        m_infer: config.get_positive_usize("m_infer")?,
    })
}

fn run_train_classifier(config: &ExperimentConfig) -> CliResult<Vec<String>> {
    let spec = classifier_spec_from(config)?;
    let eval_noise = config.get_nonnegative_f64("eval_noise")?;
    let seeds = config.get_seeds()?;

    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let run = train_classifier(&spec, seed).map_err(CliError::Core)?;

        let metrics_name = format!("metrics_seed{seed}.csv");
        write_metrics_csv(&run.history, fs::File::create(config.out_dir.join(&metrics_name))?)?;
        outputs.push(metrics_name);

        let params_name = format!("params_seed{seed}.txt");
        let mut params_file = fs::File::create(config.out_dir.join(&params_name))?;
        run.store.save(&mut params_file)?;
        outputs.push(params_name);

        // Predictions on the test set, perturbed when eval_noise is set.
        let eval_x = if eval_noise > 0.0 {
            let mut rng = StreamRng::new(seed, "eval-noise");
            tmdlab::models::data::add_noise(&run.test_x, eval_noise, &mut rng)
        } else {
            run.test_x.clone()
        };
        let logits = classifier_forward(
            &run.store,
            &run.model,
            &eval_x,
            spec.use_tmd,
            spec.m_infer.min(eval_x.rows()),
        )?;
        let predictions = argmax_rows(&logits);
        let pred_name = format!("predictions_seed{seed}.csv");
        let mut csv = CsvWriter::new(
            fs::File::create(config.out_dir.join(&pred_name))?,
            &["index", "label", "prediction"],
        )?;
        let mut correct = 0usize;
        for (idx, (label, pred)) in run.test_y.iter().zip(&predictions).enumerate() {
            csv.row(&[idx.to_string(), label.to_string(), pred.to_string()])?;
            if label == pred {
                correct += 1;
            }
        }
        outputs.push(pred_name);

        let clean_acc = run
            .history
            .iter()
            .rev()
            .find(|r| r.split == "test")
            .map(|r| r.metric_value)
            .unwrap_or(0.0);
        let noisy_acc = correct as f64 / run.test_y.len() as f64;
        summary.push((seed, clean_acc, noisy_acc));

        if i == 0 {
            let overhead = classifier_overhead_fraction(&run)?;
            println!("tmd_overhead_fraction {}", fmt_g17(overhead));
        }
    }

    let mut csv = CsvWriter::new(
        fs::File::create(config.out_dir.join("summary.csv"))?,
        &["seed", "test_accuracy", "noisy_test_accuracy"],
    )?;
    for (seed, clean, noisy) in summary {
        csv.row(&[seed.to_string(), fmt_g17(clean), fmt_g17(noisy)])?;
    }
    outputs.push("summary.csv".to_string());
    Ok(outputs)
}

pub fn pointset_spec_from(config: &ExperimentConfig) -> CliResult<PointSetSpec> {
    Ok(PointSetSpec {
        train_per_class: config.get_positive_usize("train_per_class")?,
        test_per_class: config.get_positive_usize("test_per_class")?,
        n_points: config.get_positive_usize("n_points")?,
        jitter: config.get_nonnegative_f64("jitter")?,
        embed_dim: config.get_positive_usize("embed_dim")?,
        use_tmd: config.get_bool("use_tmd")?,
        tmd: TmdSettings {
            latent_dim: config.get_positive_usize("latent_dim")?,
            epsilon: config.get_epsilon_policy("epsilon")?,
            kernel_source: config.get_kernel_source("kernel_source")?,
            freeze_delta_t: config.get_bool("freeze_delta_t")?,
            delta_t_init: config.get_f64("delta_t")?,
        },
        clouds_per_batch: config.get_positive_usize("clouds_per_batch")?,
        epochs: config.get_usize("epochs")?,
        learning_rate: config.get_positive_f64("learning_rate")?,
        momentum: config.get_nonnegative_f64("momentum")?,
    })
}

fn run_train_pointset(config: &ExperimentConfig) -> CliResult<Vec<String>> {
    let spec = pointset_spec_from(config)?;
    let seeds = config.get_seeds()?;

    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for &seed in &seeds {
        let run = train_pointset(&spec, seed).map_err(CliError::Core)?;
        let metrics_name = format!("metrics_seed{seed}.csv");
        write_metrics_csv(&run.history, fs::File::create(config.out_dir.join(&metrics_name))?)?;
        outputs.push(metrics_name);

        let params_name = format!("params_seed{seed}.txt");
        let mut params_file = fs::File::create(config.out_dir.join(&params_name))?;
        run.store.save(&mut params_file)?;
        outputs.push(params_name);

        let acc = run
            .history
            .iter()
            .rev()
            .find(|r| r.split == "test")
            .map(|r| r.metric_value)
            .unwrap_or(0.0);
        summary.push((seed, acc));
    }

    let mut csv = CsvWriter::new(
        fs::File::create(config.out_dir.join("summary.csv"))?,
        &["seed", "test_accuracy"],
    )?;
    for (seed, acc) in summary {
        csv.row(&[seed.to_string(), fmt_g17(acc)])?;
    }
    outputs.push("summary.csv".to_string());
    Ok(outputs)
}

/// Build states, the layer parameters, and run the evolution for one
/// seed; returns per-image IoU scores. Shared with the acceptance suite.
pub fn segment_one_seed(
    height: usize,
    width: usize,
    images: usize,
    image_noise: f64,
    steps: usize,
    coeffs: ChanVeseCoefficients,
    use_tmd: bool,
    delta_t: f64,
    latent_dim: usize,
    epsilon: tmdlab::kernel::EpsilonPolicy,
    seed: u64,
) -> CliResult<(Vec<LevelSetState>, Vec<Vec<bool>>, Vec<f64>)> {
    let mut rng = StreamRng::new(seed, "segment-images");
    let mut states = Vec::with_capacity(images);
    let mut truths = Vec::with_capacity(images);
    for _ in 0..images {
        let example = shape_image(height, width, image_noise, &mut rng);
        truths.push(example.mask.clone());
        states.push(
            LevelSetState::new(LevelSetState::disk_phi(height, width), example.image, coeffs)
                .map_err(CliError::Core)?,
        );
    }

    if use_tmd && images >= 1 {
        let pooled_dim = pooled_features(&states[0].phi, POOL_TARGET).len();
        let mut store = ParamStore::new();
        let mut tmd_rng = StreamRng::new(seed, "init-tmd");
        let mut params = TmdLayerParams::init(
            &mut store,
            &mut tmd_rng,
            "seg",
            pooled_dim,
            latent_dim,
            epsilon,
            HeadKind::Linear,
            KernelSource::InputFeatures,
        );
        params.freeze_delta_t = true;
        store.set(params.delta_t, Tensor::scalar(delta_t).map_err(CliError::Core)?);
        for _ in 0..steps {
            chanvese_tmd_step(&mut states, &params, &store).map_err(CliError::Core)?;
        }
    } else {
        for _ in 0..steps {
            for state in states.iter_mut() {
                chanvese_advance(state).map_err(CliError::Core)?;
            }
        }
    }

    let scores = states
        .iter()
        .zip(&truths)
        .map(|(state, truth)| iou(&state.mask(), truth))
        .collect();
    Ok((states, truths, scores))
}

fn run_segment(config: &ExperimentConfig) -> CliResult<Vec<String>> {
    let height = config.get_positive_usize("height")?;
    let width = config.get_positive_usize("width")?;
    let images = config.get_positive_usize("images")?;
    let image_noise = config.get_nonnegative_f64("image_noise")?;
    let steps = config.get_usize("steps")?;
    let coeffs = ChanVeseCoefficients {
        mu: config.get_nonnegative_f64("mu")?,
        nu: config.get_f64("nu")?,
        lambda1: config.get_nonnegative_f64("lambda1")?,
        lambda2: config.get_nonnegative_f64("lambda2")?,
        eta: config.get_positive_f64("eta")?,
        contour_dt: config.get_positive_f64("contour_dt")?,
    };
    let use_tmd = config.get_bool("use_tmd")?;
    let delta_t = config.get_f64("delta_t")?;
    let latent_dim = config.get_positive_usize("latent_dim")?;
    let epsilon = config.get_epsilon_policy("epsilon")?;
    let seeds = config.get_seeds()?;

    let mut outputs = Vec::new();
    let mut csv = CsvWriter::new(
        fs::File::create(config.out_dir.join("metrics.csv"))?,
        &["epoch", "split", "loss", "metric_name", "metric_value"],
    )?;
    for &seed in &seeds {
        let (states, _truths, scores) = segment_one_seed(
            height,
            width,
            images,
            image_noise,
            steps,
            coeffs,
            use_tmd,
            delta_t,
            latent_dim,
            epsilon,
            seed,
        )?;
        for (i, (state, score)) in states.iter().zip(&scores).enumerate() {
            let name = format!("mask_seed{seed}_img{i}.pgm");
            write_mask_pgm(&config.out_dir.join(&name), width, height, &state.mask())?;
            outputs.push(name);
            csv.row(&[
                steps.to_string(),
                format!("seed{seed}/img{i}"),
                fmt_g17(region_energy(state)),
                "iou".to_string(),
                fmt_g17(*score),
            ])?;
        }
        let mean_iou = scores.iter().sum::<f64>() / scores.len() as f64;
        csv.row(&[
            steps.to_string(),
            format!("seed{seed}/mean"),
            fmt_g17(0.0),
            "iou".to_string(),
            fmt_g17(mean_iou),
        ])?;
    }
    outputs.push("metrics.csv".to_string());
    Ok(outputs)
}

/// Mean squared deviation of the image from its region mean, the data
/// part of the segmentation energy.
fn region_energy(state: &LevelSetState) -> f64 {
    let mask = state.mask();
    let img = state.image.data();
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (value, inside) in img.iter().zip(&mask) {
        let idx = usize::from(*inside);
        sums[idx] += value;
        counts[idx] += 1;
    }
    let means = [
        if counts[0] > 0 { sums[0] / counts[0] as f64 } else { 0.0 },
        if counts[1] > 0 { sums[1] / counts[1] as f64 } else { 0.0 },
    ];
    let mut energy = 0.0;
    for (value, inside) in img.iter().zip(&mask) {
        let d = value - means[usize::from(*inside)];
        energy += d * d;
    }
    energy / img.len() as f64
}

fn run_gradcheck(config: &ExperimentConfig) -> CliResult<(Vec<String>, bool)> {
    let cases = config.get_positive_usize("cases")?;
    let step = config.get_positive_f64("step")?;
    let seed = config.get_seeds()?[0];

    let report = check_layer_gradients(cases, step, seed)?;
    let mut csv = CsvWriter::new(
        fs::File::create(config.out_dir.join("gradcheck.csv"))?,
        &["case", "group", "max_abs_diff", "max_rel_err", "pass"],
    )?;
    for c in &report.checks {
        csv.row(&[
            c.case.to_string(),
            c.group.clone(),
            fmt_g17(c.max_abs_diff),
            fmt_g17(c.max_rel_err),
            c.pass.to_string(),
        ])?;
    }
    if let Some(worst) = report.worst() {
        println!(
            "gradcheck worst: case {} group {} max_rel_err {} max_abs_diff {}",
            worst.case,
            worst.group,
            fmt_g17(worst.max_rel_err),
            fmt_g17(worst.max_abs_diff)
        );
    }
    let all_pass = report.all_pass();
    println!(
        "gradcheck: {} checks, {}",
        report.checks.len(),
        if all_pass { "all pass" } else { "FAILURES" }
    );
    Ok((vec!["gradcheck.csv".to_string()], !all_pass))
}

fn run_dump_operator(config: &ExperimentConfig) -> CliResult<Vec<String>> {
    let m = config.get_positive_usize("m")?;
    let dim = config.get_positive_usize("dim")?;
    let epsilon = config.get_positive_f64("epsilon")?;
    let identical = config.get_bool("identical")?;
    let seed = config.get_seeds()?[0];

    let rows: Vec<Vec<f64>> = if identical {
        vec![vec![0.5; dim]; m]
    } else {
        let mut rng = StreamRng::new(seed, "dump-batch");
        (0..m)
            .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    };

    let store = ParamStore::new();
    let mut rec = Recorder::new(&store);
    let x = rec.constant(Tensor::from_rows(&rows).map_err(CliError::Core)?);
    let kernel = gaussian_kernel(&mut rec.graph, x, epsilon).map_err(CliError::Core)?;
    let q = kde(&mut rec.graph, kernel).map_err(CliError::Core)?;
    let pi = target_density(&mut rec, &DensityHead::Uniform, x).map_err(CliError::Core)?;
    let op = build_tmd_operator(&mut rec.graph, kernel, q, pi, epsilon).map_err(CliError::Core)?;

    let mut text = Vec::new();
    dump_operator(&rec.graph, &op, &mut text).map_err(CliError::Core)?;
    fs::write(config.out_dir.join("operator.txt"), &text)?;
    print!("{}", String::from_utf8_lossy(&text));
    Ok(vec!["operator.txt".to_string()])
}
