//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::time::Instant;

use common::*;
use nobias_core::attribution::{
    attribute, attribute_method, AttributionRequest, FinalizationMode, Method, PropagationRule, Target, ThresholdPolicy,
};
use nobias_core::concept::concept_seed;
use nobias_core::experiments::audit::spatial_scores;
use nobias_core::experiments::studies::train_and_audit;
use nobias_core::experiments::synth::{gen_synthetic_dataset, shuffle_labels};
use nobias_core::experiments::*;
use nobias_core::par;
use nobias_core::render::render_heatmap;
use nobias_core::trainer::evaluate;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Everything a study run produces that must be reproducible byte for byte.
#[derive(PartialEq)]
struct Artifacts {
    reports: Vec<String>,
    train_reports: Vec<String>,
    checkpoints: Vec<Vec<u8>>,
    images: Vec<Vec<u8>>,
    checks: Vec<String>,
}

fn heatmaps(
    net: &nobias_core::network::SequentialNet,
    test: &nobias_core::dataset::LabeledDataset,
    target: &Target,
    indices: &[usize],
) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for &i in indices.iter().take(3) {
        for method in [Method::RectGrad, Method::NoBias] {
            let map = attribute_method(net, &test.images[i], target, method, ThresholdPolicy::default()).unwrap();
            out.push(render_heatmap(&spatial_scores(&map).unwrap()).unwrap().to_ppm());
        }
    }
    out
}

struct Runs {
    blackbox: StudyOutcome,
    blackbox_single_thread: bool,
    grey: StudyOutcome,
    grey_secs: f64,
    concept: ConceptOutcome,
}

fn run_studies(single_thread_blackbox: bool) -> Runs {
    let bb_config = BlackboxStudyConfig::default();
    let blackbox = if single_thread_blackbox {
        par::with_threads(1, || run_blackbox_study(&bb_config))
    } else {
        run_blackbox_study(&bb_config)
    }
    .expect("black-box study");
    let start = Instant::now();
    let grey = normalization_shift_experiment(&GreyStudyConfig::default()).expect("grey study");
    let grey_secs = start.elapsed().as_secs_f64();
    let concept = run_concept_study(&ConceptStudyConfig::default()).expect("concept study");
    Runs { blackbox, blackbox_single_thread: single_thread_blackbox, grey, grey_secs, concept }
}

fn artifacts(runs: &Runs, checks: Vec<String>) -> Artifacts {
    let concept_target = Target::Seed(runs.concept.concept.direction.clone());
    let mut images =
        heatmaps(&runs.blackbox.net, &runs.blackbox.test, &Target::Class(1), &runs.blackbox.report.sampled_images);
    images.extend(heatmaps(&runs.grey.net, &runs.grey.test, &Target::Class(1), &runs.grey.report.sampled_images));
    images.extend(heatmaps(
        &runs.concept.encoder,
        &runs.concept.test,
        &concept_target,
        &runs.concept.report.sampled_images,
    ));
    Artifacts {
        reports: [&runs.blackbox.report, &runs.grey.report, &runs.concept.report]
            .iter()
            .map(|r| r.to_json().unwrap())
            .collect(),
        train_reports: [&runs.blackbox.train_report, &runs.grey.train_report, &runs.concept.train_report]
            .iter()
            .map(|r| serde_json::to_string(&r.without_timing()).unwrap())
            .collect(),
        checkpoints: vec![
            runs.blackbox.net.to_checkpoint_bytes(),
            runs.grey.net.to_checkpoint_bytes(),
            runs.concept.encoder.to_checkpoint_bytes(),
            runs.concept.decoder.to_checkpoint_bytes(),
            runs.concept.concept.direction.to_nbt_bytes(),
        ],
        images,
        checks,
    }
}

fn method_audit(report: &BiasAuditReport, method: Method) -> &MethodAudit {
    report.method(method).expect("method audited")
}

fn blackbox_accuracy(runs: &Runs) -> Outcome {
    let acc = runs.blackbox.train_report.test_accuracy.unwrap_or(0.0);
    let secs = runs.blackbox.train_report.elapsed_secs;
    let epochs = runs.blackbox.train_report.epoch_loss.len();
    outcome(
        acc >= 0.98 && epochs <= 20 && secs <= 300.0 && runs.blackbox_single_thread,
        format!("test accuracy {acc:.3} after {epochs} epochs in {secs:.1}s on one thread"),
    )
}

fn exact_suppression(runs: &Runs) -> Outcome {
    let r = &runs.blackbox.report;
    let rect = method_audit(r, Method::RectGrad).min_image_inside_zero_fraction;
    let ixg = method_audit(r, Method::InputXGrad).min_image_inside_zero_fraction;
    outcome(
        rect == 1.0 && ixg == 1.0,
        format!(
            "min inside-box zero fraction over {} images: rectgrad {rect}, inputxgrad {ixg}",
            r.sampled_images.len()
        ),
    )
}

fn nobias_recovery(runs: &Runs) -> Outcome {
    let r = &runs.blackbox.report;
    let frac = method_audit(r, Method::NoBias).inside_dominates_fraction;
    outcome(
        r.valid && frac >= 0.9,
        format!("nobias inside > outside on {:.1}% of {} images", 100.0 * frac, r.sampled_images.len()),
    )
}

fn factorization() -> Outcome {
    let mut r = rng(401);
    let mut failures = 0;
    for _ in 0..100 {
        let net = random_classifier(&mut r);
        let input = uniform(&mut r, net.input_shape(), -1.0, 1.0);
        let target = Target::Class(r.gen_range(0..net.output_shape()[0]));
        let policy = ThresholdPolicy::default();
        let rect = attribute(&net, &input, &target, &rectified(policy, FinalizationMode::MultiplyInput)).unwrap();
        let nobias = attribute(&net, &input, &target, &rectified(policy, FinalizationMode::Identity)).unwrap();
        if !rect.scores.bit_eq(&input.zip_map(&nobias.scores, |x, s| x * s).unwrap()) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures}/100 pairs violate rectgrad == input * nobias"))
}

fn tau_zero_is_guided() -> Outcome {
    let mut r = rng(501);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let net = random_classifier(&mut r);
        let input = uniform(&mut r, net.input_shape(), -1.0, 1.0);
        let target = Target::Class(0);
        let guided = attribute(
            &net,
            &input,
            &target,
            &AttributionRequest::new(PropagationRule::Guided, FinalizationMode::Identity),
        )
        .unwrap();
        let rect = attribute(
            &net,
            &input,
            &target,
            &rectified(ThresholdPolicy::Absolute { tau: 0.0 }, FinalizationMode::Identity),
        )
        .unwrap();
        worst = worst.max(guided.scores.max_abs_diff(&rect.scores));
    }
    outcome(worst == 0.0, format!("max |rectified(tau=0) - guided| over 20 nets = {worst}"))
}

fn gradient_oracle() -> Outcome {
    let mut r = rng(601);
    let mut worst = 0.0f64;
    let mut min_checked = usize::MAX;
    for _ in 0..10 {
        let net = random_classifier(&mut r);
        let class = r.gen_range(0..net.output_shape()[0]);
        let (err, checked) = vanilla_vs_finite_differences(&net, &Target::Class(class), &mut r, 100);
        worst = worst.max(err);
        min_checked = min_checked.min(checked);
    }
    outcome(
        worst <= FD_TOLERANCE && min_checked >= 100,
        format!("worst relative error {worst:.2e} over 10 nets, >= {min_checked} coordinates each"),
    )
}

fn normalization_shift(runs: &Runs) -> Outcome {
    let g = &runs.grey;
    let mut grey_exact = true;
    for (image, region) in g.test.images.iter().zip(&g.test.regions) {
        if let Some(reg) = region {
            let (h, w) = (image.shape()[1], image.shape()[2]);
            for (k, &v) in image.data().iter().enumerate() {
                let p = k % (h * w);
                if reg.contains(p / w, p % w) && v != 0.0 {
                    grey_exact = false;
                }
            }
        }
    }
    let r = &g.report;
    let rect_zero = method_audit(r, Method::RectGrad).min_image_inside_zero_fraction;
    let ratio = method_audit(r, Method::RectGrad).suppression[0].suppression.ratio;
    let reference = method_audit(r, Method::RectGrad).suppression[0].reference_value;
    let dominates = method_audit(r, Method::NoBias).inside_dominates_fraction;
    let pass = grey_exact
        && rect_zero == 1.0
        && reference == 0.0
        && ratio == Some(0.0)
        && r.valid
        && dominates >= 0.9
        && runs.grey_secs <= 600.0;
    outcome(
        pass,
        format!(
            "grey pixels exactly 0: {grey_exact}; rectgrad zero fraction {rect_zero}; suppression at v0={reference}: {ratio:?}; \
             nobias inside > outside on {:.1}%; accuracy {:?}; {:.1}s",
            100.0 * dominates,
            r.test_accuracy,
            runs.grey_secs
        ),
    )
}

fn concept_properties(runs: &Runs) -> Outcome {
    let c = &runs.concept;
    let seed_exact = concept_seed(&c.concept).bit_eq(&c.concept.direction);
    let mut r = rng(801);
    let (fd_err, checked) =
        vanilla_vs_finite_differences(&c.encoder, &Target::Seed(c.concept.direction.clone()), &mut r, 100);
    let rect = method_audit(&c.report, Method::RectGrad).min_image_inside_zero_fraction;
    let ixg = method_audit(&c.report, Method::InputXGrad).min_image_inside_zero_fraction;
    let dominates = method_audit(&c.report, Method::NoBias).inside_dominates_fraction;
    outcome(
        seed_exact && fd_err <= FD_TOLERANCE && checked >= 100 && rect == 1.0 && ixg == 1.0 && dominates >= 0.8,
        format!(
            "seed == direction: {seed_exact}; finite-difference error {fd_err:.2e} at {checked} coordinates; \
             patch zero fraction rectgrad {rect}, inputxgrad {ixg}; nobias inside > outside on {:.1}% of {} positives",
            100.0 * dominates,
            c.report.sampled_images.len()
        ),
    )
}

fn label_independence() -> Outcome {
    let config = BlackboxStudyConfig::default();
    let data = gen_synthetic_dataset(&config.data).unwrap();
    let (train, test) = data.split_at(config.n_train).unwrap();
    let shuffled = shuffle_labels(&train, 1001).unwrap();
    let merged = nobias_core::dataset::LabeledDataset::new(
        shuffled.images.iter().chain(&test.images).cloned().collect(),
        shuffled.labels.iter().chain(&test.labels).copied().collect(),
        shuffled.regions.iter().chain(&test.regions).copied().collect(),
    )
    .unwrap();
    let out = train_and_audit(
        "shuffled",
        &merged,
        config.n_train,
        &config.channel_widths,
        config.net_seed,
        &config.train,
        &config.audit,
    )
    .unwrap();
    let acc = evaluate(&out.net, &test).unwrap();
    outcome((0.4..=0.6).contains(&acc), format!("test accuracy with shuffled training labels {acc:.3}"))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    let first = run_studies(true);
    results.push((1, "black-box classifier accuracy", blackbox_accuracy(&first)));
    results.push((2, "exact suppression inside the box", exact_suppression(&first)));
    results.push((3, "no-bias recovery", nobias_recovery(&first)));
    let c4 = factorization();
    let c5 = tau_zero_is_guided();
    let c6 = gradient_oracle();
    let checks = vec![c4.detail.clone(), c5.detail.clone(), c6.detail.clone()];
    results.push((4, "factorization identity", c4));
    results.push((5, "tau = 0 reduces to guided", c5));
    results.push((6, "gradient oracle", c6));
    results.push((7, "normalization-shift study", normalization_shift(&first)));
    results.push((8, "concept saliency properties", concept_properties(&first)));

    let second = run_studies(false);
    let a = artifacts(&first, checks);
    let b = artifacts(&second, vec![factorization().detail, tau_zero_is_guided().detail, gradient_oracle().detail]);
    let same = |x: bool| if x { "identical" } else { "DIFFERENT" };
    results.push((
        9,
        "determinism",
        outcome(
            a == b,
            format!(
                "reports {}, train reports {}, checkpoints {}, {} heatmaps {}, oracle checks {}",
                same(a.reports == b.reports),
                same(a.train_reports == b.train_reports),
                same(a.checkpoints == b.checkpoints),
                a.images.len(),
                same(a.images == b.images),
                same(a.checks == b.checks)
            ),
        ),
    ));
    results.push((10, "label-independence sanity", label_independence()));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
