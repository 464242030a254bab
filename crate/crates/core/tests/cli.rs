use std::path::Path;
use std::process::{Command, Output};

use ics::io::pgm;
use ics::ista::ista_reconstruct;
use ics::model::initialize_image;
use ics::sampling::{icsm, init_measurement_matrix, MatrixInit, SamplingConfig};
use ics::sparsity::Estimator;
use ics::train::measure_image;

fn ics(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ics")).args(args).env("ICS_THREADS", "2").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn sample_writes_the_requested_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.pgm");
    let out = dir.path().join("img.icsm");
    pgm::save(&img, &ics::synthetic::scene(64, 64, 1)).unwrap();
    ok(&ics(&["sample", "--in", s(&img), "--sr", "0.1", "--estimator", "sm", "--out", s(&out)]));
    let set = icsm::load(&out).unwrap();
    assert_eq!(set.sr_target, 0.1);
    assert_eq!((set.block, set.rows, set.cols), (32, 2, 2));
}

#[test]
fn metrics_of_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pgm");
    pgm::save(&a, &ics::synthetic::scene(24, 24, 2)).unwrap();
    let text = ok(&ics(&["metrics", "--ref", s(&a), "--test", s(&a)]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "reference,test,psnr,ssim");
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[2], "inf");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert!(lines[2].starts_with("mean,,inf,"));
}

#[test]
fn alloc_map_favors_the_textured_quadrant() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("q.pgm");
    let csv = dir.path().join("map.csv");
    let heat = dir.path().join("map.pgm");
    pgm::save(&img, &ics::synthetic::quadrant_texture(128)).unwrap();
    ok(&ics(&["alloc-map", "--in", s(&img), "--sr", "0.1", "--out", s(&csv), "--heatmap", s(&heat)]));
    let grid: Vec<Vec<usize>> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!((grid.len(), grid[0].len()), (4, 4));
    let max = grid.iter().flatten().max().unwrap();
    let (r, c) = (0..16).map(|i| (i / 4, i % 4)).find(|&(r, c)| grid[r][c] == *max).unwrap();
    assert!(r < 2 && c >= 2, "max at ({r}, {c})");
    let h = pgm::load(&heat).unwrap();
    assert_eq!((h.height(), h.width()), (128, 128));
    assert_eq!(h.get(10, 100).max(h.get(40, 70)), 1.0);
}

#[test]
fn file_pipeline_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("x.pgm");
    pgm::save(&img_path, &ics::synthetic::scene(32, 48, 3)).unwrap();
    let img = pgm::load(&img_path).unwrap();
    let m = dir.path().join("x.icsm");
    let common = ["--block", "8", "--seed", "5"];
    let mut args = vec!["sample", "--in", s(&img_path), "--sr", "0.25", "--estimator", "std", "--out", s(&m)];
    args.extend(common);
    ok(&ics(&args));

    let mm = init_measurement_matrix(&SamplingConfig::new(8, 0.5, 5).unwrap(), MatrixInit::OrthonormalRows).unwrap();
    let mem = measure_image(&img, &mm, 0.25, Estimator::Std).unwrap();
    let file = icsm::load(&m).unwrap();
    assert_eq!(file, mem);

    let init = dir.path().join("init.pgm");
    let mut args = vec!["init-recon", "--in", s(&m), "--out", s(&init)];
    args.extend(common);
    ok(&ics(&args));
    assert_eq!(std::fs::read(&init).unwrap(), pgm::encode(&initialize_image(&mem, &mm).unwrap()));

    let rec = dir.path().join("ista.pgm");
    let mut args = vec!["reconstruct-ista", "--in", s(&m), "--iters", "20", "--threshold", "0.02", "--out", s(&rec)];
    args.extend(common);
    ok(&ics(&args));
    assert_eq!(std::fs::read(&rec).unwrap(), pgm::encode(&ista_reconstruct(&mem, &mm, 20, 0.02).unwrap()));
}

#[test]
fn unaligned_images_are_padded_and_cropped_back() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("odd.pgm");
    pgm::save(&img, &ics::synthetic::scene(21, 13, 4)).unwrap();
    let m = dir.path().join("odd.icsm");
    let out = ics(&["sample", "--in", s(&img), "--sr", "0.3", "--block", "8", "--out", s(&m)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--size 21x13"));
    let rec = dir.path().join("rec.pgm");
    ok(&ics(&["reconstruct-ista", "--in", s(&m), "--block", "8", "--size", "21x13", "--out", s(&rec)]));
    let r = pgm::load(&rec).unwrap();
    assert_eq!((r.height(), r.width()), (21, 13));
}

#[test]
fn exit_codes() {
    let out = ics(&["sample", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.pgm");
    let out = ics(&["sample", "--in", s(&missing), "--sr", "0.1", "--block", "4", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let img = dir.path().join("tiny.pgm");
    pgm::save(&img, &ics::synthetic::scene(8, 8, 5)).unwrap();
    let out = ics(&["sample", "--in", s(&img), "--sr", "1.5", "--block", "4", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = ics(&["metrics", "--ref", s(&img), "--test", s(&img)]);
    assert_eq!(out.status.code(), Some(1), "SSIM needs an 11x11 image");
}

#[test]
fn train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&ics(&[
        "train-toy", "--out", s(&run), "--steps", "2", "--batch", "1", "--images", "2", "--size", "32", "--seed", "3",
    ]));
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(loss.lines().next().unwrap(), "step,l1,l2,l3,total");

    let img = dir.path().join("x.pgm");
    pgm::save(&img, &ics::synthetic::scene(32, 64, 6)).unwrap();
    let out = dir.path().join("y.pgm");
    let (w, c) = (run.join("weights.icst"), run.join("config.json"));
    let text = ok(&ics(&["infer", "--in", s(&img), "--weights", s(&w), "--config", s(&c), "--sr", "0.2", "--out", s(&out)]));
    assert!(text.starts_with("ratio="));
    let y = pgm::load(&out).unwrap();
    assert_eq!((y.height(), y.width()), (32, 64));

    // the archive also serves as the measurement matrix for the classical path
    let m = dir.path().join("x.icsm");
    ok(&ics(&["sample", "--in", s(&img), "--sr", "0.2", "--weights", s(&w), "--out", s(&m)]));
    let out2 = dir.path().join("y2.pgm");
    ok(&ics(&["infer", "--in", s(&m), "--weights", s(&w), "--config", s(&c), "--out", s(&out2)]));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn gradcheck_reports_every_case() {
    let text = ok(&ics(&["gradcheck", "--coords", "3", "--size", "32"]));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.len() > 40);
    assert!(rows.iter().all(|r| r.ends_with(",PASS")));
    assert!(rows.iter().any(|r| r.starts_with("uformer_toy,")));
}
