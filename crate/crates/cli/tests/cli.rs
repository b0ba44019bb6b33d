use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nobias_core::network::{build_classifier, SequentialNet};
use nobias_core::Tensor;

fn nobias(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nobias")).args(args).current_dir(cwd).output().expect("spawn nobias")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = nobias(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small boxed dataset plus a briefly trained classifier.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_path_buf();
    ok(&["gen-data", "--n", "120", "--image-size", "16", "--box-size", "4", "--seed", "3", "--out", "d"], &p);
    ok(&["train", "--data", "d", "--n-train", "100", "--epochs", "2", "--out", "m.nbc"], &p);
    (dir, p)
}

#[test]
fn gen_data_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["gen-data", "--n", "1200", "--box-fraction", "0.5", "--seed", "9", "--out", "a"], p);
    ok(&["gen-data", "--n", "1200", "--box-fraction", "0.5", "--seed", "9", "--out", "b"], p);
    let boxes = std::fs::read_to_string(p.join("a/boxes.csv")).unwrap();
    assert_eq!(boxes.lines().count() - 1, 600);
    for f in ["images.nbt", "labels.csv", "boxes.csv", "dataset.json"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seeds"]["data"], 9);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);

    let bad = nobias(&["gen-data", "--box-size", "40", "--image-size", "32", "--out", "c"], p);
    assert_eq!(code(&bad), 2);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["gen-data", "--n", "60", "--image-size", "16", "--box-size", "4", "--out", "d"], p);
    ok(&["train", "--data", "d", "--lr", "0", "--epochs", "1", "--net-seed", "5", "--out", "m.nbc"], p);
    let trained = SequentialNet::load_checkpoint(p.join("m.nbc")).unwrap();
    let fresh = build_classifier(&[1, 16, 16], &[8, 16, 32], 2, 5).unwrap();
    assert_eq!(trained.to_checkpoint_bytes(), fresh.to_checkpoint_bytes());
    assert!(p.join("m.report.json").exists() && p.join("m.manifest.json").exists());

    std::fs::write(p.join("bad.nbc"), b"NBC1\n{\"version\":1").unwrap();
    let out = nobias(&["train", "--data", "d", "--resume", "bad.nbc", "--out", "r.nbc"], p);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn attribute_methods_and_oracle() {
    let (_dir, p) = fixture();
    let boxes = std::fs::read_to_string(p.join("d/boxes.csv")).unwrap();
    let first: Vec<usize> = boxes.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let (index, row, col, size) = (first[0].to_string(), first[1], first[2], first[3]);
    for (method, out) in [("rectgrad", "r.nbt"), ("nobias", "n.nbt"), ("vanilla", "v.nbt")] {
        ok(&["attribute", "--model", "m.nbc", "--data", "d", "--index", &index, "--method", method, "--out", out], &p);
    }
    ok(&["fd-gradient", "--model", "m.nbc", "--data", "d", "--index", &index, "--out", "fd.nbt"], &p);
    let images = Tensor::load(p.join("d/images.nbt")).unwrap();
    let i: usize = index.parse().unwrap();
    let plane = 16 * 16;
    let x = &images.data()[i * plane..(i + 1) * plane];
    let r = Tensor::load(p.join("r.nbt")).unwrap();
    let n = Tensor::load(p.join("n.nbt")).unwrap();
    for (k, &xk) in x.iter().enumerate() {
        assert_eq!(r.data()[k].to_bits(), (xk * n.data()[k]).to_bits());
        if (row..row + size).contains(&(k / 16)) && (col..col + size).contains(&(k % 16)) {
            assert_eq!(r.data()[k], 0.0);
        }
    }
    let v = Tensor::load(p.join("v.nbt")).unwrap();
    let fd = Tensor::load(p.join("fd.nbt")).unwrap();
    for (a, b) in v.data().iter().zip(fd.data()) {
        let denom = a.abs().max(b.abs());
        assert!(denom == 0.0 || (a - b).abs() / denom <= 1e-6, "{a} vs {b}");
    }
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(sidecar["taus"].as_array().unwrap().len(), 3);
    assert_eq!(sidecar["finalization"], "multiply_input");

    let bogus = nobias(
        &["attribute", "--model", "m.nbc", "--data", "d", "--index", "0", "--method", "bogus", "--out", "x.nbt"],
        &p,
    );
    assert_eq!(code(&bogus), 2);
}

#[test]
fn audit_outputs_flags_and_determinism() {
    let (_dir, p) = fixture();
    let args = |out: &'static str| -> Vec<&'static str> {
        vec!["audit", "--model", "m.nbc", "--data", "d", "--n-train", "100", "--n-samples", "6", "--out", out]
    };
    let first = nobias(&args("a1"), &p);
    let second = nobias(&args("a2"), &p);
    // A two-epoch model misses the accuracy floor: the run completes but is flagged.
    assert_eq!(code(&first), 4, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&second), 4);
    let report = std::fs::read(p.join("a1/report.json")).unwrap();
    assert_eq!(report, std::fs::read(p.join("a2/report.json")).unwrap());
    let parsed: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(parsed["valid"], false);
    let rect = parsed["methods"].as_array().unwrap().iter().find(|m| m["method"] == "rectgrad").unwrap();
    assert_eq!(rect["min_image_inside_zero_fraction"], 1.0);
    let scatter = std::fs::read_to_string(p.join("a1/scatter_nobias.csv")).unwrap();
    assert!(scatter.starts_with("pixel_value,score\n"));
    let hist = std::fs::read_to_string(p.join("a1/histogram_rectgrad.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count_inside,count_outside\n"));
    assert_eq!(hist.lines().count(), 51);

    let lenient = nobias(
        &[
            "audit",
            "--model",
            "m.nbc",
            "--data",
            "d",
            "--n-train",
            "100",
            "--n-samples",
            "4",
            "--accuracy-floor",
            "0",
            "--out",
            "a3",
        ],
        &p,
    );
    assert_eq!(code(&lenient), 0);
    let empty = nobias(&["audit", "--model", "m.nbc", "--data", "d", "--methods", "", "--out", "a4"], &p);
    assert_eq!(code(&empty), 2);
    let neither = nobias(&["audit", "--out", "a5"], &p);
    assert_eq!(code(&neither), 2);
}

#[test]
fn render_zero_symmetric_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    Tensor::zeros(&[4, 5]).save(p.join("z.nbt")).unwrap();
    ok(&["render", "--scores", "z.nbt", "--out", "z.ppm"], p);
    let z = std::fs::read(p.join("z.ppm")).unwrap();
    assert!(z.starts_with(b"P6\n5 4\n255\n"));
    assert!(z[11..].iter().all(|&b| b == 255));

    let t = Tensor::new(vec![2, 3], vec![1.0, -0.5, 0.0, 0.25, -2.0, 3.0]).unwrap();
    t.save(p.join("t.nbt")).unwrap();
    t.map(|v| -v).save(p.join("neg.nbt")).unwrap();
    ok(&["render", "--scores", "t.nbt", "--out", "t1.ppm"], p);
    ok(&["render", "--scores", "t.nbt", "--out", "t2.ppm"], p);
    ok(&["render", "--scores", "neg.nbt", "--out", "n.ppm"], p);
    let (a, b) = (std::fs::read(p.join("t1.ppm")).unwrap(), std::fs::read(p.join("n.ppm")).unwrap());
    assert_eq!(a, std::fs::read(p.join("t2.ppm")).unwrap());
    let header = b"P6\n3 2\n255\n".len();
    for (x, y) in a[header..].chunks(3).zip(b[header..].chunks(3)) {
        assert_eq!([x[0], x[1], x[2]], [y[2], y[1], y[0]]);
    }

    Tensor::zeros(&[3, 4, 4]).save(p.join("c.nbt")).unwrap();
    assert_eq!(code(&nobias(&["render", "--scores", "c.nbt", "--out", "c.ppm"], p)), 2);
    ok(&["render", "--scores", "c.nbt", "--reduce", "mean-abs", "--out", "c.ppm"], p);
}

#[test]
fn concept_build_and_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        &[
            "gen-data",
            "--kind",
            "concept",
            "--n",
            "40",
            "--image-size",
            "16",
            "--patch-height",
            "3",
            "--patch-width",
            "6",
            "--out",
            "d",
        ],
        p,
    );
    ok(
        &[
            "train",
            "--data",
            "d",
            "--arch",
            "encoder",
            "--latent-dim",
            "4",
            "--epochs",
            "1",
            "--lr",
            "0.01",
            "--out",
            "e.nbc",
        ],
        p,
    );
    assert!(p.join("e.decoder.nbc").exists());
    ok(&["concept-build", "--model", "e.nbc", "--data", "d", "--n-train", "30", "--out", "c.nbt"], p);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("c.json")).unwrap()).unwrap();
    assert_eq!(sidecar["latent_dim"], 4);
    let enc = SequentialNet::load_checkpoint(p.join("e.nbc")).unwrap();
    assert_eq!(sidecar["encoder_digest"], enc.digest());

    let boxes = std::fs::read_to_string(p.join("d/boxes.csv")).unwrap();
    let first: Vec<usize> = boxes.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let index = first[0].to_string();
    ok(
        &[
            "concept-attribute",
            "--model",
            "e.nbc",
            "--concept",
            "c.nbt",
            "--data",
            "d",
            "--index",
            &index,
            "--method",
            "inputxgrad",
            "--out",
            "s.nbt",
        ],
        p,
    );
    let s = Tensor::load(p.join("s.nbt")).unwrap();
    for r in first[1]..first[1] + first[3] {
        for c in first[2]..first[2] + first[4] {
            assert_eq!(s.data()[r * 16 + c], 0.0);
        }
    }
    ok(
        &[
            "attribute",
            "--model",
            "e.nbc",
            "--target",
            "c.nbt",
            "--data",
            "d",
            "--index",
            &index,
            "--method",
            "inputxgrad",
            "--out",
            "s2.nbt",
        ],
        p,
    );
    assert_eq!(std::fs::read(p.join("s.nbt")).unwrap(), std::fs::read(p.join("s2.nbt")).unwrap());
}

#[test]
fn pnm_images_are_accepted() {
    let (_dir, p) = fixture();
    let img = Tensor::new(vec![1, 16, 16], (0..256).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
    nobias_core::render::save_pnm(&img, p.join("x.pgm")).unwrap();
    ok(&["attribute", "--model", "m.nbc", "--image", "x.pgm", "--method", "nobias", "--out", "x.nbt"], &p);
    assert_eq!(Tensor::load(p.join("x.nbt")).unwrap().shape(), &[1, 16, 16]);
}
