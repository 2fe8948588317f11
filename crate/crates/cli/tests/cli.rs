use std::path::Path;
use std::process::{Command, Output};

use base64::Engine;
use rellie_cli::service::{Service, ServiceConfig};
use rellie_core::agent::{Agent, AgentConfig};
use rellie_core::checkpoint::{load_checkpoint, save_checkpoint};
use rellie_core::image::{gamma_darken, save_image, ImageRGB};
use rellie_core::reward::LossBreakdown;
use rellie_core::trainer::TrainConfig;

fn rellie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rellie"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rellie(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene(h: usize, w: usize) -> ImageRGB {
    let img = ImageRGB::from_fn(h, w, |c, y, x| 0.2 + 0.25 * c as f32 + 0.3 * (((x * 7 + y * 3) % 11) as f32 / 11.0)).unwrap();
    gamma_darken(&img, 2.5).unwrap()
}

fn setup(dir: &Path) {
    let agent = Agent::new(AgentConfig { layers: 3, width: 8, kernel: 3, seed: 21 }).unwrap();
    save_checkpoint(&agent, &TrainConfig::zero_shot(), dir.join("tiny.ckpt")).unwrap();
    save_image(&scene(18, 22), dir.join("low.png")).unwrap();
}

#[test]
fn envelope_prints_the_table() {
    let out = ok(&["envelope", "--steps", "1,6", "--skip", "1.0"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "input,min_1,max_1,min_6,max_6");
    assert_eq!(lines.len(), 102);
    let row: Vec<f64> = lines[6].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.05);
    assert!((row[4] - 0.9625).abs() < 1e-4, "{row:?}");
    assert!(!rellie(&["envelope", "--skip", "1.5"]).status.success());
}

#[test]
fn losses_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let low = dir.path().join("low.png");
    let b: LossBreakdown = serde_json::from_str(&ok(&["losses", "--in", p(&low), "--ref", p(&low)])).unwrap();
    assert_eq!((b.spa, b.tva, b.crl), (0.0, 0.0, 0.0));
    assert!(b.exp > 0.0);
    let zero: LossBreakdown = serde_json::from_str(&ok(&["losses", "--in", p(&low), "--ref", p(&low), "--weights", "0,0,0,0"])).unwrap();
    assert_eq!(zero.total, 0.0);
    assert!(!rellie(&["losses", "--in", p(&low), "--ref", p(&low), "--weights", "1,2"]).status.success());
}

#[test]
fn enhance_matches_service_steps() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let (low, ckpt) = (dir.path().join("low.png"), dir.path().join("tiny.ckpt"));
    let svc = Service::new(ServiceConfig::new(dir.path()));
    let input = std::fs::read(&low).unwrap();

    for (flags, apply_rf) in [(vec![], false), (vec!["--rf"], true)] {
        let out = dir.path().join("out.png");
        let mut args = vec!["enhance", "--in", p(&low), "--out", p(&out), "--ckpt", p(&ckpt), "--steps", "3"];
        args.extend(flags);
        ok(&args);
        let cli_bytes = std::fs::read(&out).unwrap();

        let (id, _) = svc.create_session(&input, "tiny", None).unwrap();
        let rt = tokio::runtime::Runtime::new().unwrap();
        let view = rt.block_on(async {
            let mut last = None;
            for _ in 0..3 {
                last = Some(
                    svc.with_session(&id, move |s| {
                        let k = s.step(apply_rf)?.step;
                        rellie_cli::service::StateView::of(s, k)
                    })
                    .await
                    .unwrap(),
                );
            }
            last.unwrap()
        });
        let service_bytes = base64::engine::general_purpose::STANDARD.decode(view.png_b64).unwrap();
        assert_eq!(cli_bytes, service_bytes, "flags {apply_rf}");
    }
}

#[test]
fn enhance_options_change_output() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let (low, ckpt) = (dir.path().join("low.png"), dir.path().join("tiny.ckpt"));
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["enhance", "--in", p(&low), "--out", p(&out), "--ckpt", p(&ckpt)];
        args.extend_from_slice(extra);
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let zero = run("zero.png", &["--steps", "0"]);
    assert_eq!(zero, ImageRGB::from_png_bytes(&std::fs::read(&low).unwrap()).unwrap().to_png_bytes().unwrap());
    let greedy = run("greedy.png", &["--steps", "4"]);
    assert_eq!(greedy, run("greedy2.png", &["--steps", "4"]));
    let sampled = run("sampled.png", &["--steps", "4", "--seed", "9"]);
    assert_eq!(sampled, run("sampled2.png", &["--steps", "4", "--seed", "9"]));
    assert_ne!(sampled, greedy);
    assert_ne!(run("every2.png", &["--steps", "4", "--rf-every", "2"]), run("every1.png", &["--steps", "4", "--rf"]));
    let ppm = run("out.ppm", &["--steps", "1"]);
    assert!(ppm.starts_with(b"P6\n22 18\n255\n"));
}

#[cfg(unix)]
#[test]
fn enhance_with_external_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let (low, ckpt) = (dir.path().join("low.png"), dir.path().join("tiny.ckpt"));
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    // a copying "denoiser" only quantizes, which one step's PNG output does anyway
    let copy = r#"sh -c 'test -s "$2" && cp "$0" "$1"' {in} {out} {map}"#;
    ok(&["enhance", "--in", p(&low), "--out", p(&a), "--ckpt", p(&ckpt), "--steps", "1", "--rf", "--denoiser", copy]);
    ok(&["enhance", "--in", p(&low), "--out", p(&b), "--ckpt", p(&ckpt), "--steps", "1"]);
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());

    let out = rellie(&["enhance", "--in", p(&low), "--out", p(&a), "--ckpt", p(&ckpt), "--rf", "--denoiser", "/nonexistent/denoiser {in} {map} {out}"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("denoiser failed to start"));
    let out = rellie(&["enhance", "--in", p(&low), "--out", p(&a), "--ckpt", p(&ckpt), "--rf", "--denoiser", "sh -c 'echo junk > \"$0\"' {out} {in} {map}"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed output"));
}

#[test]
fn enhance_reports_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let low = dir.path().join("low.png");
    let out = rellie(&["enhance", "--in", p(&low), "--out", "x.png", "--ckpt", p(&dir.path().join("none.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = rellie(&["enhance", "--in", "missing.png", "--out", "x.png", "--ckpt", p(&dir.path().join("tiny.ckpt"))]);
    assert!(!out.status.success());
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let low = dir.path().join("low.png");
    let train = |name: &str| {
        let (ckpt, log) = (dir.path().join(format!("{name}.ckpt")), dir.path().join(format!("{name}.csv")));
        ok(&[
            "train", "--mode", "zero-shot", "--data", p(&low), "--iters", "3", "--steps", "2", "--seed", "4", "--out", p(&ckpt), "--log", p(&log),
        ]);
        (std::fs::read(ckpt).unwrap(), std::fs::read_to_string(log).unwrap())
    };
    let (ck1, log1) = train("a");
    let (ck2, log2) = train("b");
    assert_eq!(ck1, ck2);
    assert_eq!(log1, log2);
    let lines: Vec<&str> = log1.lines().collect();
    assert_eq!(lines[0], "iteration,l_spa,l_exp,l_tva,l_crl,l_total,mean_reward");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,") || lines[3].starts_with("2,"), "{}", lines[3]);

    let saved = load_checkpoint(dir.path().join("a.ckpt")).unwrap();
    assert_eq!(saved.train.iterations, 3);
    assert_eq!(saved.train.steps, 2);
    assert_eq!(saved.agent.config().layers, 4);

    // log to stdout when no file is given
    let stdout = ok(&["train", "--mode", "zero-shot", "--data", p(&low), "--iters", "1", "--steps", "1", "--out", p(&dir.path().join("c.ckpt"))]);
    assert_eq!(stdout.lines().count(), 2);
}

#[test]
fn train_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = p(&dir.path().join("x.ckpt")).to_string();
    let d = p(dir.path()).to_string();
    assert!(!rellie(&["train", "--mode", "zero-shot", "--data", &d, "--out", &out]).status.success());
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let res = rellie(&["train", "--mode", "unsupervised", "--data", p(&empty), "--iters", "1", "--out", &out]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("empty dataset"));
    let low = p(&dir.path().join("low.png")).to_string();
    assert!(!rellie(&["train", "--mode", "zero-shot", "--data", &low, "--gamma", "2", "--out", &out]).status.success());
}

#[test]
fn unsupervised_training_on_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    save_image(&scene(12, 14), data.join("a.png")).unwrap();
    save_image(&scene(20, 10), data.join("b.png")).unwrap();
    let ckpt = dir.path().join("u.ckpt");
    let log = ok(&["train", "--mode", "unsupervised", "--data", p(&data), "--iters", "2", "--steps", "2", "--out", p(&ckpt)]);
    assert_eq!(log.lines().count(), 3);
    assert_eq!(load_checkpoint(&ckpt).unwrap().agent.config().layers, 7);
}

#[test]
fn eval_prints_per_image_and_mean_rows() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let (low, high) = (dir.path().join("low"), dir.path().join("high"));
    std::fs::create_dir(&low).unwrap();
    std::fs::create_dir(&high).unwrap();
    for (name, h, w) in [("x.png", 16, 16), ("y.png", 14, 20)] {
        let bright = ImageRGB::from_fn(h, w, |c, y, x| 0.3 + 0.1 * c as f32 + 0.02 * ((x + y) % 10) as f32).unwrap();
        save_image(&bright, high.join(name)).unwrap();
        save_image(&gamma_darken(&bright, 2.5).unwrap(), low.join(name)).unwrap();
    }
    save_image(&scene(12, 12), low.join("unpaired.png")).unwrap();
    let csv = ok(&["eval", "--pairs", p(&low), p(&high), "--ckpt", p(&dir.path().join("tiny.ckpt")), "--steps", "2"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image,psnr,ssim,input_psnr,input_ssim");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("x.png,") && lines[2].starts_with("y.png,"));
    let cols = |l: &str| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
    let (x, y, mean) = (cols(lines[1]), cols(lines[2]), cols(lines[3]));
    assert!(lines[3].starts_with("mean,"));
    for i in 0..4 {
        assert!((mean[i] - (x[i] + y[i]) / 2.0).abs() < 1e-3, "column {i}");
    }
}
