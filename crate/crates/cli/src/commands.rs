use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use elgs_core::backbone::{forward, BlockInput, ModelParams, NetworkParams, StageTimings, Variant};
use elgs_core::cloud::{generate_synthetic_scene, load_cloud, save_cloud, CloudFormat, PointCloud, SceneSpec};
use elgs_core::config::apply_override;
use elgs_core::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use elgs_core::tensor::{Graph, Tensor};
use elgs_core::train::{
    evaluate, format_ablation_table, init_params, predict_cloud, prepare_dataset, run_ablation, run_robustness,
    train_from, Perturbation,
};
use elgs_core::{Error, ExperimentConfig, Result};
use serde_json::json;

use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn gen_data(scene: &str, out: &Path, points_per_plane: usize, jitter: f64, seed: u64) -> Result<ExitCode> {
    let spec = match scene {
        "two-planes" => SceneSpec::two_planes(points_per_plane, jitter),
        "four-class" => SceneSpec::four_class(jitter),
        path => serde_json::from_str(&std::fs::read_to_string(path)?)?,
    };
    let cloud = generate_synthetic_scene(&spec, seed)?;
    save_cloud(&cloud, out, CloudFormat::from_path(out))?;
    eprintln!("wrote {} points to {}", cloud.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

pub fn train(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    log: Option<&Path>,
    lr: Option<f64>,
    epochs: Option<usize>,
) -> Result<ExitCode> {
    let mut cfg = load_config(args)?;
    if let Some(lr) = lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let cloud = read_cloud(data)?;
    let dataset = prepare_dataset(&cloud, &cfg.data, &cfg.network, cfg.train.seed)?;
    let log_path = log.map_or_else(|| default_log_path(out), Path::to_path_buf);
    let mut writer = BufWriter::new(File::create(&log_path)?);
    let mut write_err = None;
    let init = init_params(&cfg.network, cfg.train.seed)?;
    let outcome = train_from(&dataset, &cfg.network, &cfg.train, init, &mut |record| {
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(writer, "{line}").and_then(|_| writer.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    outcome.params.save(out)?;
    let last = outcome.log.last().expect("at least one epoch");
    eprintln!(
        "trained {} epochs on {} blocks: loss {:.5}, oa {:.4}, miou {:.4}",
        outcome.log.len(),
        dataset.len(),
        last.loss,
        last.oa,
        last.miou
    );
    if !outcome.loss_increases.is_empty() {
        eprintln!(
            "warning: 10-epoch mean loss rose at epochs {:?}",
            outcome.loss_increases
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(
    args: &ConfigArgs,
    data: &Path,
    model: Option<&Path>,
    predicted: Option<&Path>,
    robustness: bool,
) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let truth = read_cloud(data)?;
    truth.validate(Some(cfg.network.num_classes))?;
    let labels = truth
        .labels
        .as_ref()
        .ok_or_else(|| Error::Format(format!("{} has no label column", data.display())))?;

    if let Some(pred_path) = predicted {
        let pred = read_cloud(pred_path)?;
        let pred_labels = pred
            .labels
            .ok_or_else(|| Error::Format(format!("{} has no label column", pred_path.display())))?;
        print_json(&evaluate(&pred_labels, labels, cfg.network.num_classes)?)?;
        return Ok(ExitCode::SUCCESS);
    }

    let params = ModelParams::load(model.expect("clap requires --model without --predicted"))?;
    let pred = predict_cloud(&params, &cfg.network, &cfg.data, &truth, cfg.train.seed, cfg.train.precision)?;
    let metrics = evaluate(&pred, labels, cfg.network.num_classes)?;
    if robustness {
        let report = run_robustness(
            &params,
            &cfg.network,
            &cfg.data,
            &truth,
            &Perturbation::standard_suite(),
            cfg.train.seed,
            cfg.train.precision,
        )?;
        print_json(&json!({ "metrics": metrics, "robustness": report }))?;
    } else {
        print_json(&metrics)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn predict(args: &ConfigArgs, model: &Path, input: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let cloud = read_cloud(input)?;
    let params = ModelParams::load(model)?;
    let pred = predict_cloud(&params, &cfg.network, &cfg.data, &cloud, cfg.train.seed, cfg.train.precision)?;
    let labeled = cloud.with_labels(pred);
    save_cloud(&labeled, out, CloudFormat::from_path(out))?;
    eprintln!("wrote {} labeled points to {}", labeled.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => GradcheckConfig::default(),
    };
    for o in overrides {
        apply_override(&mut cfg, o)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let report = run_gradcheck(&cfg)?;
    print_json(&report)?;
    println!("max relative error: {:e}", report.max_rel_error);
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "gradcheck failed: {:e} > {:e} at {}[{}]",
            report.max_rel_error, report.tolerance, report.worst_param, report.worst_index
        );
        ExitCode::from(2)
    })
}

pub fn ablate(args: &ConfigArgs, data: &Path, variants: &[String], out: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let variants = variants
        .iter()
        .map(|v| v.trim().parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let cloud = read_cloud(data)?;
    let dataset = prepare_dataset(&cloud, &cfg.data, &cfg.network, cfg.train.seed)?;
    let rows = run_ablation(&dataset, &cfg.network, &cfg.train, &variants)?;
    print!("{}", format_ablation_table(&rows));
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn bench(args: &ConfigArgs, points: usize, repeats: usize) -> Result<ExitCode> {
    use rand::{Rng, SeedableRng};

    let cfg = load_config(args)?;
    let net = &cfg.network;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let xyz: Vec<[f64; 3]> = (0..points)
        .map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0f32) as f64))
        .collect();
    let mut feats = Vec::with_capacity(points * net.in_channels);
    for p in &xyz {
        feats.extend_from_slice(p);
        feats.extend(std::iter::repeat_n(0.0, net.in_channels.saturating_sub(3)));
    }
    let features = Tensor::new(vec![points, net.in_channels], feats)?;
    let start = Instant::now();
    let input = BlockInput::from_points(xyz, features, None, net)?;
    let geometry_ms = start.elapsed().as_secs_f64() * 1e3;
    let params = init_params(net, cfg.train.seed)?;

    let mut runs = Vec::new();
    for _ in 0..repeats.max(1) {
        let mut timings = StageTimings::default();
        let mut g = Graph::new(cfg.train.precision);
        let bound = params.bind(&mut g);
        let vars = NetworkParams::bind(&bound, net)?;
        let start = Instant::now();
        forward(&mut g, &vars, net, &input, Some(&mut timings))?;
        let total = start.elapsed().as_secs_f64() * 1e3;
        let stages: Vec<_> = timings
            .stages
            .iter()
            .map(|(name, d)| json!({ "stage": name, "ms": d.as_secs_f64() * 1e3 }))
            .collect();
        runs.push(json!({ "forward_ms": total, "stages": stages }));
    }
    print_json(&json!({
        "points": points,
        "parameters": params.scalar_count(),
        "geometry_ms": geometry_ms,
        "runs": runs,
    }))?;
    Ok(ExitCode::SUCCESS)
}
