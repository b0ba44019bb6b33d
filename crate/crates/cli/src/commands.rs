use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nobias_core::attribution::{self, AttributionRequest, SaliencyMap, Target, ThresholdPolicy};
use nobias_core::concept::{self, ConceptVector};
use nobias_core::dataset::LabeledDataset;
use nobias_core::experiments::audit::{scatter_csv, AuditConfig, BiasAuditReport};
use nobias_core::experiments::studies::{partition_by_label, StudyOutcome};
use nobias_core::experiments::synth::{self, Background};
use nobias_core::experiments::{
    normalization_shift_experiment, run_blackbox_study, run_concept_study, BlackboxStudyConfig, ConceptDatasetSpec,
    ConceptStudyConfig, GreyObjectSpec, GreyStudyConfig, SyntheticDatasetSpec,
};
use nobias_core::network::{build_classifier, build_decoder, build_encoder, SequentialNet};
use nobias_core::render::{self, load_pnm};
use nobias_core::trainer::{self, TrainConfig};
use nobias_core::Tensor;
use serde::Serialize;

use crate::manifest::{sibling, Run};
use crate::*;

/// A flag combination that cannot be honoured.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_model(path: &Path) -> Result<SequentialNet> {
    SequentialNet::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn default_split(n: usize) -> usize {
    n * 5 / 6
}

pub fn gen_data(args: &GenDataArgs) -> Result<Status> {
    let mut run = Run::new("gen-data", args)?;
    run.seed("data", args.seed);
    let (data, description) = match args.kind {
        DataKind::Blackbox => {
            let spec = SyntheticDatasetSpec {
                n_images: args.n.unwrap_or(1200),
                image_size: args.image_size,
                channels: args.channels,
                box_size: args.box_size,
                box_fraction: args.box_fraction,
                background: Background::ValueNoise {
                    cell_size: args.cell_size,
                    low: args.noise_low.unwrap_or(0.2),
                    high: args.noise_high,
                },
                seed: args.seed,
            };
            (synth::gen_synthetic_dataset(&spec)?, serde_json::json!({ "kind": "blackbox", "spec": spec }))
        }
        DataKind::Grey => {
            let spec = GreyObjectSpec {
                n_images: args.n.unwrap_or(1200),
                image_size: args.image_size,
                object_size: args.box_size,
                object_fraction: args.box_fraction,
                cell_size: args.cell_size,
                grey_gap: args.grey_gap,
                seed: args.seed,
            };
            let scaling = args.scaling.affine();
            let data = synth::gen_grey_dataset(&spec, &scaling)?;
            (data, serde_json::json!({ "kind": "grey", "spec": spec, "scaling": scaling }))
        }
        DataKind::Concept => {
            let spec = ConceptDatasetSpec {
                n_images: args.n.unwrap_or(600),
                image_size: args.image_size,
                patch_height: args.patch_height,
                patch_width: args.patch_width,
                positive_fraction: args.box_fraction,
                background: Background::ValueNoise {
                    cell_size: args.cell_size,
                    low: args.noise_low.unwrap_or(0.4),
                    high: args.noise_high,
                },
                seed: args.seed,
            };
            (synth::gen_concept_dataset(&spec)?, serde_json::json!({ "kind": "concept", "spec": spec }))
        }
    };
    for (name, bytes) in datadir::encode(&data, &description)? {
        run.write(args.out.join(name), &bytes)?;
    }
    let positives = data.labels.iter().filter(|&&l| l == 1).count();
    eprintln!("wrote {} images ({positives} labeled 1) to {}", data.len(), args.out.display());
    run.finish(args.out.join("manifest.json"))?;
    Ok(Status::Ok)
}

fn split(data: &LabeledDataset, n_train: Option<usize>) -> Result<(LabeledDataset, LabeledDataset)> {
    let n_train = n_train.unwrap_or_else(|| default_split(data.len()));
    if n_train == 0 || n_train >= data.len() {
        return Err(usage(format!("--n-train {n_train} must leave both splits non-empty for {} images", data.len())));
    }
    Ok(data.split_at(n_train)?)
}

fn train_config(flags: &TrainFlags) -> TrainConfig {
    TrainConfig { learning_rate: flags.lr, epochs: flags.epochs, batch_size: flags.batch_size, seed: flags.train_seed }
}

fn resume_or(
    path: Option<&PathBuf>,
    run: &mut Run,
    expected_input: &[usize],
    fresh: impl FnOnce() -> nobias_core::Result<SequentialNet>,
) -> Result<SequentialNet> {
    match path {
        Some(p) => {
            let net = load_model(p)?;
            if net.input_shape() != expected_input {
                return Err(nobias_core::Error::Shape(format!(
                    "checkpoint {} expects input {:?}, data has {:?}",
                    p.display(),
                    net.input_shape(),
                    expected_input
                ))
                .into());
            }
            run.input(p);
            Ok(net)
        }
        None => Ok(fresh()?),
    }
}

pub fn train(args: &TrainArgs) -> Result<Status> {
    let mut run = Run::new("train", args)?;
    run.seed("train", args.train.train_seed);
    run.seed("net", args.train.net_seed);
    let data = datadir::read(&args.data)?;
    for f in datadir::input_files(&args.data) {
        run.input(f);
    }
    let (train_set, test) = split(&data, args.n_train)?;
    let shape = data.image_shape().expect("non-empty dataset").to_vec();
    let config = train_config(&args.train);
    let report = match args.arch {
        Arch::Classifier => {
            let mut net = resume_or(args.resume.as_ref(), &mut run, &shape, || {
                build_classifier(&shape, &args.widths, 2, args.train.net_seed)
            })?;
            let report = trainer::train_classifier(&mut net, &train_set, &test, &config)?;
            run.write(&args.out, &net.to_checkpoint_bytes())?;
            report
        }
        Arch::Encoder => {
            let mut enc = resume_or(args.resume.as_ref(), &mut run, &shape, || {
                build_encoder(&shape, args.latent_dim, args.train.net_seed)
            })?;
            let latent = enc.output_shape().to_vec();
            let mut dec = match &args.resume_decoder {
                Some(p) => {
                    run.input(p);
                    load_model(p)?
                }
                None => build_decoder(latent[0], args.decoder_hidden, &shape, args.train.net_seed.wrapping_add(1))?,
            };
            let report = trainer::train_encoder(&mut enc, &mut dec, &train_set.images, &config)?;
            run.write(&args.out, &enc.to_checkpoint_bytes())?;
            run.write(sibling(&args.out, "decoder.nbc"), &dec.to_checkpoint_bytes())?;
            report
        }
    };
    run.write(sibling(&args.out, "report.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    if let Some(acc) = report.test_accuracy {
        eprintln!("test accuracy {acc:.4}");
    }
    if let Some(loss) = report.epoch_loss.last() {
        eprintln!("final epoch loss {loss:.6}");
    }
    run.finish(sibling(&args.out, "manifest.json"))?;
    Ok(Status::Ok)
}

fn load_image(flags: &ImageFlags, run: &mut Run) -> Result<Tensor> {
    match (&flags.image, &flags.data, flags.index) {
        (Some(path), None, None) => {
            run.input(path);
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            if ext == "pgm" || ext == "ppm" || ext == "pnm" {
                let scaling = flags.scaling.affine();
                Ok(load_pnm(path)?.map(|v| scaling.apply(v)))
            } else {
                Tensor::load(path).with_context(|| format!("loading image {}", path.display()))
            }
        }
        (None, Some(dir), Some(index)) => {
            let data = datadir::read(dir)?;
            for f in datadir::input_files(dir) {
                run.input(f);
            }
            data.images
                .get(index)
                .cloned()
                .ok_or_else(|| usage(format!("--index {index} out of range for {} images", data.len())))
        }
        _ => Err(usage("give either --image or --data with --index")),
    }
}

fn load_concept(path: &Path, run: &mut Run) -> Result<ConceptVector> {
    run.input(path);
    let sidecar = sibling(path, "json");
    run.input(&sidecar);
    Ok(ConceptVector::load(path, &sidecar).with_context(|| format!("loading concept {}", path.display()))?.0)
}

fn parse_target(spec: &str, run: &mut Run) -> Result<Target> {
    match spec.parse::<usize>() {
        Ok(class) => Ok(Target::Class(class)),
        Err(_) => Ok(Target::Seed(load_concept(Path::new(spec), run)?.direction)),
    }
}

fn policy(flags: &ThresholdFlags) -> Result<ThresholdPolicy> {
    let p = match flags.tau_policy {
        TauPolicy::Percentile => ThresholdPolicy::Percentile { q: flags.q },
        TauPolicy::Absolute => ThresholdPolicy::Absolute { tau: flags.tau },
    };
    p.validate()?;
    Ok(p)
}

fn save_map(map: &SaliencyMap, out: &Path, run: &mut Run) -> Result<()> {
    run.write(out, &map.scores.to_nbt_bytes())?;
    run.write(sibling(out, "json"), (map.sidecar_json()? + "\n").as_bytes())?;
    if !map.method.taus.is_empty() {
        eprintln!("thresholds per ReLU layer: {:?}", map.method.taus);
    }
    Ok(())
}

pub fn attribute(args: &AttributeArgs) -> Result<Status> {
    let mut run = Run::new("attribute", args)?;
    let net = load_model(&args.model)?;
    run.input(&args.model);
    let image = load_image(&args.image, &mut run)?;
    let target = parse_target(&args.target, &mut run)?;
    let request = args.method.request(policy(&args.threshold)?).with_reduction(args.reduction.mode());
    let map = attribution::attribute(&net, &image, &target, &request)?;
    save_map(&map, &args.out, &mut run)?;
    run.finish(sibling(&args.out, "manifest.json"))?;
    Ok(Status::Ok)
}

pub fn fd_gradient(args: &FdArgs) -> Result<Status> {
    let mut run = Run::new("fd-gradient", args)?;
    let net = load_model(&args.model)?;
    run.input(&args.model);
    let image = load_image(&args.image, &mut run)?;
    let target = parse_target(&args.target, &mut run)?;
    let grad = attribution::finite_difference_gradient(&net, &image, &target, args.step)?;
    run.write(&args.out, &grad.to_nbt_bytes())?;
    run.finish(sibling(&args.out, "manifest.json"))?;
    Ok(Status::Ok)
}

fn audit_config(args: &AuditArgs) -> Result<AuditConfig> {
    if args.methods.is_empty() {
        return Err(usage("--methods must name at least one method"));
    }
    let config = AuditConfig {
        methods: args.methods.clone(),
        threshold_policy: policy(&args.threshold)?,
        n_samples: args.n_samples,
        sample_seed: args.sample_seed,
        accuracy_floor: args.accuracy_floor,
        reference_values: args.reference_values.clone(),
        band_half_width: args.band_half_width,
        scatter_cap: args.scatter_cap,
    };
    config.validate()?;
    Ok(config)
}

fn override_train(base: TrainConfig, args: &AuditArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: args.lr.unwrap_or(base.learning_rate),
        epochs: args.epochs.unwrap_or(base.epochs),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        seed: args.train_seed,
    }
}

fn write_audit(report: &BiasAuditReport, out: &Path, run: &mut Run) -> Result<()> {
    run.write(out.join("report.json"), report.to_json()?.as_bytes())?;
    for m in &report.methods {
        run.write(out.join(format!("scatter_{}.csv", m.method)), scatter_csv(&m.scatter).as_bytes())?;
        run.write(out.join(format!("histogram_{}.csv", m.method)), m.histogram.to_csv().as_bytes())?;
    }
    for m in &report.methods {
        let outside = m.outside.as_ref().map_or(f64::NAN, |o| o.mean_abs);
        eprintln!(
            "{:>10}: inside zero fraction {:.3} (min per image {:.3}), inside > outside on {:.1}% of images, mean |score| inside {:.3e} outside {:.3e}",
            m.method.to_string(),
            m.inside_zero_fraction,
            m.min_image_inside_zero_fraction,
            100.0 * m.inside_dominates_fraction,
            m.inside.mean_abs,
            outside
        );
    }
    Ok(())
}

fn status_of(report: &BiasAuditReport) -> Status {
    if report.valid {
        Status::Ok
    } else {
        Status::Invalid(format!(
            "test accuracy {:?} is below the floor {}; the report is flagged invalid",
            report.test_accuracy, report.accuracy_floor
        ))
    }
}

fn write_study_outcome(outcome: &StudyOutcome, out: &Path, run: &mut Run) -> Result<()> {
    run.write(out.join("model.nbc"), &outcome.net.to_checkpoint_bytes())?;
    run.write(out.join("train_report.json"), (serde_json::to_string_pretty(&outcome.train_report)? + "\n").as_bytes())?;
    write_audit(&outcome.report, out, run)
}

pub fn audit(args: &AuditArgs) -> Result<Status> {
    let mut run = Run::new("audit", args)?;
    let config = audit_config(args)?;
    run.seed("sample", args.sample_seed);
    let report = match (args.study, &args.model, &args.data) {
        (Some(study), None, None) => {
            run.seed("data", args.seed);
            run.seed("train", args.train_seed);
            run.seed("net", args.net_seed);
            match study {
                Study::Blackbox => {
                    let mut c = BlackboxStudyConfig { net_seed: args.net_seed, audit: config, ..Default::default() };
                    c.data.seed = args.seed;
                    c.data.n_images = args.n.unwrap_or(c.data.n_images);
                    c.n_train = args.n_train.unwrap_or(c.n_train);
                    c.train = override_train(c.train, args);
                    let outcome = run_blackbox_study(&c)?;
                    write_study_outcome(&outcome, &args.out, &mut run)?;
                    outcome.report
                }
                Study::Grey => {
                    let mut c = GreyStudyConfig { net_seed: args.net_seed, audit: config, ..Default::default() };
                    c.data.seed = args.seed;
                    c.data.n_images = args.n.unwrap_or(c.data.n_images);
                    c.n_train = args.n_train.unwrap_or(c.n_train);
                    c.train = override_train(c.train, args);
                    let outcome = normalization_shift_experiment(&c)?;
                    write_study_outcome(&outcome, &args.out, &mut run)?;
                    outcome.report
                }
                Study::Concept => {
                    let mut c = ConceptStudyConfig { net_seed: args.net_seed, audit: config, ..Default::default() };
                    c.data.seed = args.seed;
                    c.data.n_images = args.n.unwrap_or(c.data.n_images);
                    c.n_train = args.n_train.unwrap_or(c.n_train);
                    c.train = override_train(c.train, args);
                    let outcome = run_concept_study(&c)?;
                    run.write(args.out.join("encoder.nbc"), &outcome.encoder.to_checkpoint_bytes())?;
                    run.write(args.out.join("decoder.nbc"), &outcome.decoder.to_checkpoint_bytes())?;
                    run.write(args.out.join("concept.nbt"), &outcome.concept.direction.to_nbt_bytes())?;
                    run.write(
                        args.out.join("train_report.json"),
                        (serde_json::to_string_pretty(&outcome.train_report)? + "\n").as_bytes(),
                    )?;
                    write_audit(&outcome.report, &args.out, &mut run)?;
                    outcome.report
                }
            }
        }
        (None, Some(model), Some(dir)) => {
            let net = load_model(model)?;
            run.input(model);
            let data = datadir::read(dir)?;
            for f in datadir::input_files(dir) {
                run.input(f);
            }
            let audited = match args.n_train {
                Some(n) => split(&data, Some(n))?.1,
                None => data,
            };
            let (target, accuracy, study) = match &args.concept {
                Some(path) => (Target::Seed(load_concept(path, &mut run)?.direction), None, "concept"),
                None => (Target::Class(1), Some(trainer::evaluate(&net, &audited)?), "model"),
            };
            let report = nobias_core::experiments::audit(study, &net, &audited, &target, accuracy, &config)?;
            write_audit(&report, &args.out, &mut run)?;
            report
        }
        _ => return Err(usage("give either --study, or --model with --data")),
    };
    run.finish(args.out.join("manifest.json"))?;
    Ok(status_of(&report))
}

pub fn render(args: &RenderArgs) -> Result<Status> {
    let mut run = Run::new("render", args)?;
    run.input(&args.scores);
    let scores = Tensor::load(&args.scores).with_context(|| format!("loading scores {}", args.scores.display()))?;
    let plane = match (scores.ndim(), args.reduce.and_then(Reduction::mode)) {
        (2, _) => scores,
        (3, Some(mode)) => attribution::reduce_channels(&scores, mode)?,
        (3, None) if scores.shape()[0] == 1 => scores.reshape(&scores.shape()[1..])?,
        _ => {
            return Err(usage(format!(
                "scores of shape {:?} need --reduce mean|mean-abs to become a 2-D map",
                scores.shape()
            )))
        }
    };
    let percentile = match args.normalize {
        Normalize::Percentile => args.percentile,
        Normalize::Max => 1.0,
    };
    let image = match args.colormap {
        Colormap::Diverging => render::render_heatmap_with(&plane, percentile)?,
    };
    run.write(&args.out, &image.to_ppm())?;
    run.finish(sibling(&args.out, "manifest.json"))?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct ConceptSummary {
    n_pos: usize,
    n_neg: usize,
}

pub fn concept_build(args: &ConceptBuildArgs) -> Result<Status> {
    let mut run = Run::new("concept-build", args)?;
    let encoder = load_model(&args.model)?;
    run.input(&args.model);
    let data = datadir::read(&args.data)?;
    for f in datadir::input_files(&args.data) {
        run.input(f);
    }
    let used = match args.n_train {
        Some(n) => split(&data, Some(n))?.0,
        None => data,
    };
    let (pos, neg) = partition_by_label(&used);
    let concept = concept::build_concept_vector(&encoder, &pos, &neg)?;
    let sidecar = sibling(&args.out, "json");
    concept.save(&args.out, &sidecar, &encoder)?;
    run.output(&args.out);
    run.output(&sidecar);
    eprintln!("{}", serde_json::to_string(&ConceptSummary { n_pos: concept.n_pos, n_neg: concept.n_neg })?);
    run.finish(sibling(&args.out, "manifest.json"))?;
    Ok(Status::Ok)
}

pub fn concept_attribute(args: &ConceptAttributeArgs) -> Result<Status> {
    let mut run = Run::new("concept-attribute", args)?;
    let encoder = load_model(&args.model)?;
    run.input(&args.model);
    let concept = load_concept(&args.concept, &mut run)?;
    let image = load_image(&args.image, &mut run)?;
    let request: AttributionRequest =
        args.method.request(policy(&args.threshold)?).with_reduction(args.reduction.mode());
    let map = concept::concept_saliency(&encoder, &image, &concept, &request)?;
    save_map(&map, &args.out, &mut run)?;
    run.finish(sibling(&args.out, "manifest.json"))?;
    Ok(Status::Ok)
}
