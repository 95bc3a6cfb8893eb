use std::path::Path;
use std::process::{Command, Output};

use treecodec::coder::{decode_image, encode_image};
use treecodec::eval::metrics::to_8bit;
use treecodec::image_io;
use treecodec::model::{Checkpoint, ModelConfig, TreeCodec};
use treecodec::synth;

fn treecodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treecodec")).args(args).output().expect("binary runs")
}

fn text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Stdout without the echoed `# key = value` configuration.
fn results(out: &Output) -> Vec<String> {
    text(out).lines().filter(|l| !l.starts_with("# ")).map(String::from).collect()
}

fn small_model(dir: &Path) -> (TreeCodec<f32>, String) {
    let cfg = ModelConfig {
        channels: 8,
        latent_channels: 8,
        hyper_channels: 8,
        aff_reduction: 2,
        context_kernel: 5,
    };
    let model = TreeCodec::new(cfg, 9).unwrap();
    let path = dir.join("m.tnwt");
    Checkpoint::save(&path, &model, 2, None).unwrap();
    (model, path.display().to_string())
}

#[test]
fn encode_then_decode_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (model, weights) = small_model(dir.path());
    let img = synth::generate(41, 70, 100);
    let input = dir.path().join("pic.png");
    image_io::save(&input, &img).unwrap();
    let d = |p: &str| dir.path().join(p).display().to_string();

    let enc = treecodec(&["--csv", "encode", "--model", &weights, "--input", &d("pic.png"), "--out", &d("bits")]);
    assert!(enc.status.success(), "{}", String::from_utf8_lossy(&enc.stderr));
    assert!(text(&enc).starts_with("file,bytes,bpp\n"));
    let bytes = std::fs::read(dir.path().join("bits/pic.tnbs")).unwrap();
    let loaded = image_io::load::<f32>(&input).unwrap();
    assert_eq!(bytes, encode_image(&model, &loaded, 2).unwrap().bytes);

    let dec = treecodec(&["decode", "--model", &weights, "--input", &d("bits/pic.tnbs"), "--out", &d("bits")]);
    assert!(dec.status.success(), "{}", String::from_utf8_lossy(&dec.stderr));
    assert!(text(&dec).contains("100x70"));
    let got = image_io::load::<f32>(&dir.path().join("bits/pic.png")).unwrap();
    let want = decode_image(&model, &bytes).unwrap().image().unwrap();
    assert_eq!(to_8bit(&got).data(), to_8bit(&want).data());
}

#[test]
fn damaged_bitstream_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (model, weights) = small_model(dir.path());
    let bytes = encode_image(&model, &synth::generate(5, 64, 64), 0).unwrap().bytes;
    let path = dir.path().join("cut.tnbs");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let out = treecodec(&["decode", "--model", &weights, "--input", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn bd_reads_curve_files() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.csv");
    let test = dir.path().join("test.csv");
    let rows = |k: f64| {
        let pts = [(0.1, 28.0, 0.90), (0.2, 31.0, 0.94), (0.4, 34.0, 0.96), (0.8, 37.0, 0.98)];
        let body: String = pts.iter().map(|(b, p, m)| format!("c,{},{p},{m}\n", b * k)).collect();
        format!("codec,bpp,psnr,msssim\n{body}")
    };
    std::fs::write(&base, rows(1.0)).unwrap();
    std::fs::write(&test, rows(2.0)).unwrap();
    for metric in ["psnr", "msssim"] {
        let out = treecodec(&["--csv", "bd", "--base", base.to_str().unwrap(), "--test", test.to_str().unwrap(), "--metric", metric]);
        assert!(out.status.success());
        let line = text(&out).lines().nth(1).unwrap().to_string();
        let percent: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((percent - 100.0).abs() < 1e-6, "{metric}: {line}");
    }
}

#[test]
fn complexity_csv_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = treecodec(&["--csv", "complexity", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("# channels = 32"));
    assert!(!text(&out).contains("# "));
    assert_eq!(std::fs::read_to_string(dir.path().join("complexity.csv")).unwrap(), text(&out));
    assert!(dir.path().join("complexity.txt").exists());
}

#[test]
fn ablate_and_bitmap_write_images() {
    let dir = tempfile::tempdir().unwrap();
    let (_, weights) = small_model(dir.path());
    let input = dir.path().join("pic.png");
    image_io::save(&input, &synth::generate(2, 64, 64)).unwrap();
    let out = dir.path().join("abl");
    let r = treecodec(&["ablate", "--model", &weights, "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(results(&r).len(), 8);
    let r = treecodec(&["bitmap", "--model", &weights, "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--index", "3"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let written = results(&r);
    assert!(!written.is_empty());
    for line in written {
        assert!(Path::new(&line).exists(), "{line}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(treecodec(&["encode"]).status.code(), Some(1));
    assert_eq!(treecodec(&["bitmap", "--model", "m", "--input", "i", "--out", "o", "--index", "x"]).status.code(), Some(1));
    assert_eq!(treecodec(&["--help"]).status.code(), Some(0));
}
