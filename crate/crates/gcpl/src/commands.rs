//! Command implementations behind the CLI: pretrain, train, classify,
//! benchmark, inspect. Every command echoes the fully resolved config into
//! the output directory before doing work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::classifier::{classify, ClassifierConfig, QueryRecord};
use crate::config::RunConfig;
use crate::denoiser::{make_class_conditions, pretrain_backbone, Denoiser, DenoiserModel};
use crate::error::{Error, Result};
use crate::harness::{
    benchmark_csv, build_episode, generate_synthetic, read_latent_folder, resolve_template, run_benchmark,
    train_episode_prompts, BenchmarkReport, BenchmarkSettings, ClassData, Dataset, Method,
};
use crate::plot::{accuracy_plot_svg, PlotSeries};
use crate::prompt::EmbeddingStore;
use crate::rng::{derive_seed, streams};
use crate::tensor::Tensor;

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(config: &RunConfig) -> Result<()> {
    write_file(
        &config.paths.output_dir.join("resolved.toml"),
        config.resolved_toml().as_bytes(),
    )
}

/// Builds the dataset named by the config: a synthetic task or a folder of
/// latents (folder samples all land in the train split).
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match config.data.source.as_str() {
        "synthetic" => generate_synthetic(&config.synthetic_spec()),
        "folder" => {
            let dir = config.data.folder.as_ref().expect("validated at load");
            let entries = read_latent_folder(dir)?;
            let mut by_label: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
            for (label, latent) in entries {
                if label.is_empty() {
                    return Err(Error::InsufficientData(
                        "folder datasets need class subdirectories to define labels".into(),
                    ));
                }
                if latent.len() != config.backbone.latent_dim {
                    return Err(Error::ShapeMismatch {
                        context: "folder latent",
                        expected: vec![config.backbone.latent_dim],
                        got: vec![latent.len()],
                    });
                }
                by_label.entry(label).or_default().push(latent);
            }
            Ok(Dataset {
                latent_dim: config.backbone.latent_dim,
                classes: by_label
                    .into_iter()
                    .map(|(name, train)| ClassData {
                        name,
                        train,
                        test: Vec::new(),
                    })
                    .collect(),
            })
        }
        other => Err(Error::Config(format!("unknown data.source {other:?}"))),
    }
}

fn load_backbone(config: &RunConfig) -> Result<DenoiserModel> {
    let model = DenoiserModel::load_from_path(&config.paths.backbone)?;
    let arch = model.architecture();
    let want = config.architecture();
    if *arch != want {
        return Err(Error::Config(format!(
            "stored backbone architecture {arch:?} does not match the config {want:?}"
        )));
    }
    Ok(model)
}

fn settings(config: &RunConfig) -> Result<BenchmarkSettings> {
    let template = match &config.dataset_name {
        Some(name) => Some(resolve_template(name)?),
        None => None,
    };
    Ok(BenchmarkSettings {
        n_way: config.episode.n_way,
        gcpl: config.gcpl_config(),
        comple: config.comple_config(),
        classifier: config.classifier_config(),
        template,
    })
}

/// Pretrains the frozen backbone on the configured dataset and writes the
/// versioned model file plus a loss trace (`pretrain_loss.csv`).
pub fn cmd_pretrain(config: &RunConfig) -> Result<PathBuf> {
    echo_config(config)?;
    let schedule = config.noise_schedule()?;
    let dataset = load_dataset(config)?;
    let conditions = make_class_conditions(
        dataset.n_classes(),
        config.backbone.cond_dim,
        config.backbone.cond_scale,
        config.seed,
    );
    let (model, report) = pretrain_backbone(
        config.architecture(),
        &dataset.train_pairs(),
        &conditions,
        &schedule,
        &config.pretrain_config(),
    )?;

    if let Some(parent) = config.paths.backbone.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    model.save_to_path(&config.paths.backbone)?;

    let mut csv = String::from("step,loss\n");
    for (step, loss) in &report.loss_samples {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    write_file(&config.paths.output_dir.join("pretrain_loss.csv"), csv.as_bytes())?;
    Ok(config.paths.backbone.clone())
}

/// Trains class prompts over one episode of the configured dataset and
/// writes the embedding store.
pub fn cmd_train(method: Method, config: &RunConfig) -> Result<PathBuf> {
    echo_config(config)?;
    let schedule = config.noise_schedule()?;
    let model = load_backbone(config)?;
    let dataset = load_dataset(config)?;
    let episode = build_episode(&dataset, config.episode.n_way, config.episode.k_shot, config.seed)?;
    let settings = settings(config)?;
    let prompts = train_episode_prompts(method, &episode, &settings, config.seed, &model, &schedule)?;
    let names: Vec<String> = prompts
        .iter()
        .map(|p| dataset.classes[p.class_id].name.clone())
        .collect();
    let store = EmbeddingStore::from_prompts(&prompts, &names)?;
    if let Some(parent) = config.paths.embeddings.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    store.save_to_path(&config.paths.embeddings)?;
    Ok(config.paths.embeddings.clone())
}

/// Classifies queries against the stored prompts and writes one JSON line
/// per query. Queries come from an explicit latent file or folder, or from
/// the configured dataset's test split when no path is given.
pub fn cmd_classify(config: &RunConfig, queries_path: Option<&Path>) -> Result<PathBuf> {
    echo_config(config)?;
    let schedule = config.noise_schedule()?;
    let model = load_backbone(config)?;
    let store = EmbeddingStore::load_from_path(&config.paths.embeddings)?;
    if store.cond_dim != config.backbone.cond_dim {
        return Err(Error::Config(format!(
            "embedding store cond_dim {} does not match backbone cond_dim {}",
            store.cond_dim, config.backbone.cond_dim
        )));
    }
    let prompts = store.to_prompts()?;
    let class_names: Vec<String> = store.entries.iter().map(|(n, _)| n.clone()).collect();

    let queries: Vec<(Option<String>, Tensor)> = match queries_path {
        Some(path) if path.is_dir() => read_latent_folder(path)?
            .into_iter()
            .map(|(label, x)| ((!label.is_empty()).then_some(label), x))
            .collect(),
        Some(path) => vec![(None, crate::harness::read_latent(path)?)],
        None => {
            let dataset = load_dataset(config)?;
            let mut out = Vec::new();
            for name in &class_names {
                let class = dataset
                    .classes
                    .iter()
                    .find(|c| &c.name == name)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("stored class {name:?} is not present in the dataset"))
                    })?;
                out.extend(class.test.iter().map(|x| (Some(name.clone()), x.clone())));
            }
            out
        }
    };
    if queries.is_empty() {
        return Err(Error::InsufficientData("no queries to classify".into()));
    }

    let base = config.classifier_config();
    let mut lines = String::new();
    for (query_id, (true_label, x)) in queries.iter().enumerate() {
        if x.len() != model.architecture().latent_dim {
            return Err(Error::ShapeMismatch {
                context: "query latent",
                expected: vec![model.architecture().latent_dim],
                got: vec![x.len()],
            });
        }
        let cfg = ClassifierConfig {
            seed: derive_seed(config.seed, streams::QUERY_BASE + query_id as u64),
            ..base
        };
        let report = classify(x, &prompts, &cfg, &model, &schedule)?;
        let record = QueryRecord::from_report(query_id, true_label.clone(), &class_names, &report);
        lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        lines.push('\n');
    }
    let out_path = config.paths.output_dir.join("classify.jsonl");
    write_file(&out_path, lines.as_bytes())?;
    Ok(out_path)
}

/// Runs the accuracy-vs-shots sweep for every configured method and writes
/// per-method JSON reports, the combined CSV table, and the SVG plot.
pub fn cmd_benchmark(config: &RunConfig) -> Result<Vec<PathBuf>> {
    echo_config(config)?;
    let schedule = config.noise_schedule()?;
    let model = load_backbone(config)?;
    let dataset = load_dataset(config)?;
    let settings = settings(config)?;
    let cell_seeds: Vec<u64> = config.benchmark.seeds.iter().map(|&s| config.seed.wrapping_add(s)).collect();

    let mut written = Vec::new();
    let mut reports: Vec<BenchmarkReport> = Vec::new();
    for method in config.methods() {
        let report = run_benchmark(
            &dataset,
            method,
            &config.benchmark.shots,
            &cell_seeds,
            &settings,
            &model,
            &schedule,
        )?;
        let json_path = config.paths.output_dir.join(format!("benchmark_{method}.json"));
        write_file(
            &json_path,
            serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
        )?;
        written.push(json_path);
        reports.push(report);
    }

    let csv_path = config.paths.output_dir.join("benchmark.csv");
    write_file(&csv_path, benchmark_csv(&reports).as_bytes())?;
    written.push(csv_path);

    let series: Vec<PlotSeries> = reports
        .iter()
        .map(|r| PlotSeries {
            label: r.method.to_string(),
            points: r
                .summaries
                .iter()
                .map(|s| (s.shots as f64, s.mean_accuracy))
                .collect(),
        })
        .collect();
    let svg_path = config.paths.output_dir.join("accuracy_vs_shots.svg");
    write_file(&svg_path, accuracy_plot_svg(&series).as_bytes())?;
    written.push(svg_path);
    Ok(written)
}

/// Renders any versioned binary file as human-readable text, dispatching
/// on the magic tag.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let norm = |values: &[f32]| -> f64 {
        values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    };
    let mut out = String::new();
    if bytes.starts_with(b"GCPLDNZ") {
        let model = DenoiserModel::load(&mut bytes.as_slice())?;
        let arch = model.architecture();
        out.push_str("backbone model file\n");
        out.push_str(&format!(
            "  architecture: latent_dim={} time_embed_dim={} cond_dim={} hidden_dim={} hidden_layers=2 max_timestep={}\n",
            arch.latent_dim, arch.time_embed_dim, arch.cond_dim, arch.hidden_dim, arch.max_timestep
        ));
        out.push_str(&format!("  frozen: {}\n", model.is_frozen()));
        out.push_str(&format!("  parameter bytes: {}\n", model.param_bytes().len()));
        out.push_str(&format!("  cond_mean l2 norm: {:.6}\n", norm(model.cond_mean().data())));
    } else if bytes.starts_with(b"GCPLEMB") {
        let store = EmbeddingStore::load(&mut bytes.as_slice())?;
        out.push_str("embedding store file\n");
        out.push_str(&format!("  cond_dim: {}\n", store.cond_dim));
        out.push_str(&format!("  classes: {}\n", store.entries.len()));
        for (name, embedding) in &store.entries {
            out.push_str(&format!("  {name}: l2 norm {:.6}\n", norm(embedding.data())));
        }
    } else if bytes.starts_with(b"GCPLLAT") {
        let latent = crate::harness::read_latent_from(&mut bytes.as_slice())?;
        out.push_str("latent sample file\n");
        out.push_str(&format!("  dim: {}\n", latent.len()));
        let preview: Vec<String> = latent.data().iter().take(8).map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("  values: [{}{}]\n", preview.join(", "), if latent.len() > 8 { ", ..." } else { "" }));
    } else {
        return Err(Error::Format(format!(
            "unrecognized file {}: magic does not match any versioned format",
            path.display()
        )));
    }
    Ok(out)
}
