use std::path::Path;
use std::process::{Command, Output};

use histotile_core::dataset::{write_slide_list, ClassLabel, SlideEntry};
use histotile_core::raster::RgbImage;
use histotile_core::wsi::writer::{write_pyramid, TiffWriteOptions};

fn histotile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histotile"))
        .args(args)
        .env_remove("HISTOTILE_THREADS")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr {text:?} is not JSON: {e}"))
}

fn manifest_rows(work: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(work.join("manifest.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

/// One 4096×4096 slide scanned at 40x, uniformly stained.
fn square_slide(dir: &Path) {
    let image = RgbImage::filled(4096, 4096, [180, 90, 160]);
    let opts = TiffWriteOptions { tile_size: 512, ..Default::default() };
    write_pyramid(&dir.join("square.tif"), &[image], "Aperio |AppMag = 40", &opts).unwrap();
    let entry = SlideEntry { path: dir.join("square.tif"), class_label: ClassLabel::Scc, magnification: None };
    let file = std::fs::File::create(dir.join("slides.tsv")).unwrap();
    write_slide_list(file, &[entry], dir).unwrap();
}

#[test]
fn eval_before_train_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().to_str().unwrap();
    let out = histotile(&["eval", "--work-dir", work]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "missing_artifact");
    assert_eq!(err["exit_code"], 3);
}

#[test]
fn bad_configuration_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().to_str().unwrap();
    let out = histotile(&["split", "--work-dir", work, "--min-tissue", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "config_error");

    let out = histotile(&["split", "--work-dir", work, "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));

    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "tile_size 12\n").unwrap();
    let out = histotile(&["split", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiling_a_40x_square_at_20x_gives_four_tiles() {
    let dir = tempfile::tempdir().unwrap();
    square_slide(dir.path());
    let work = dir.path().join("run");
    let out = histotile(&[
        "tile",
        "--work-dir",
        work.to_str().unwrap(),
        "--slides-dir",
        dir.path().to_str().unwrap(),
        "--target-mag",
        "20",
        "--tile-size",
        "1024",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = manifest_rows(&work);
    assert_eq!(rows.len(), 4);
    let mut origins: Vec<(String, String)> = rows.iter().map(|r| (r[3].clone(), r[4].clone())).collect();
    origins.sort();
    let want: Vec<(String, String)> = [("0", "0"), ("0", "1024"), ("1024", "0"), ("1024", "1024")]
        .iter()
        .map(|(x, y)| (x.to_string(), y.to_string()))
        .collect();
    assert_eq!(origins, want);
    assert_eq!(std::fs::read_dir(work.join("tiles")).unwrap().count(), 4);
}

#[test]
fn command_line_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    square_slide(dir.path());
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!("# file settings\nslides_dir = {}\ntile_size = 2048\n", dir.path().display()),
    )
    .unwrap();
    let run = |work: &str, extra: &[&str]| {
        let work = dir.path().join(work);
        let mut args = vec!["tile", "--config", conf.to_str().unwrap(), "--work-dir", work.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = histotile(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        manifest_rows(&work)
    };
    let from_file = run("file", &[]);
    assert_eq!(from_file.len(), 1);
    assert_eq!(from_file[0][5], "2048");
    let flag = run("flag", &["--tile-size", "1024"]);
    assert_eq!(flag.len(), 4);
    let set = run("set", &["--set", "tile_size=512"]);
    assert_eq!(set.len(), 16);
}

#[test]
fn small_pipeline_is_complete_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let slides = dir.path().join("slides");
    let out = histotile(&[
        "synth",
        "--out",
        slides.to_str().unwrap(),
        "--slides-per-class",
        "1",
        "--width",
        "2048",
        "--height",
        "2048",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let conf = dir.path().join("small.conf");
    std::fs::write(
        &conf,
        format!(
            "slides_dir = {}\ntile_size = 128\ninput_size = 32\nwidth_scale = 1/16\nfc1 = 16\nfc2 = 16\n\
             train_n = 16\nval_n = 4\ntest_n = 8\nepochs = 2\nhead_epochs = 2\nbatch_size = 8\n",
            slides.display()
        ),
    )
    .unwrap();
    let reports: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let work = dir.path().join(name);
            let out = histotile(&["pipeline", "--config", conf.to_str().unwrap(), "--work-dir", work.to_str().unwrap()]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            for artifact in [
                "manifest.tsv",
                "features.bin",
                "weights/backbone.vggw",
                "weights/head.vggw",
                "weights/model.vggw",
                "stage1_history.tsv",
                "stage1_report.tsv",
                "history.tsv",
                "eval_report.tsv",
                "runlog.tsv",
            ] {
                assert!(work.join(artifact).is_file(), "{artifact} missing");
            }
            let runlog = std::fs::read_to_string(work.join("runlog.tsv")).unwrap();
            assert_eq!(runlog.lines().count(), 1 + 7 + 1);
            let history = std::fs::read_to_string(work.join("history.tsv")).unwrap();
            assert_eq!(history.lines().count(), 1 + 2);
            std::fs::read(work.join("eval_report.tsv")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let line = String::from_utf8(reports[0].clone()).unwrap();
    let fields: Vec<&str> = line.trim_end().split('\t').collect();
    assert_eq!(fields.len(), 8);
    let total: u64 = fields[4..].iter().map(|v| v.parse::<u64>().unwrap()).sum();
    assert_eq!(total, 16);
}
