use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ocnet_cli::commands::{self, EvalOptions, TrainOptions, CHECKPOINT_FILE};
use ocnet_cli::visualize::{heatmaps, visualize};
use ocnet_cli::{Checkpoint, CliError, RunConfig};
use ocnet_core::context::{ContextKind, ContextModule};
use ocnet_core::data::{batch_tensor, load_manifest, MANIFEST};
use ocnet_core::nn::Parameterized;
use proptest::prelude::*;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// A small, fast configuration rooted in `dir`.
fn tiny(dir: &Path) -> RunConfig {
    let text = "module = base-oc\nimage_size = 16\ntrain_size = 6\nval_size = 3\n\
                batch_size = 2\niterations = 10\neval_every = 0\n";
    RunConfig::parse(text, dir).unwrap()
}

fn run_train(cfg: &RunConfig, opts: &TrainOptions, out: &Path) -> ocnet_cli::Result<commands::TrainReport> {
    commands::train(cfg, opts, out, &mut std::io::sink())
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_counted_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train_size = 4;
    cfg.data_seed = 1;
    let out = dir.path().join("a");
    commands::gen_data(&cfg, &out).unwrap();
    let manifest = fs::read_to_string(out.join("train").join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert_eq!(files_in(&out.join("train/images")).len(), 4);
    assert_eq!(files_in(&out.join("train/labels")).len(), 4);

    let again = dir.path().join("b");
    commands::gen_data(&cfg, &again).unwrap();
    for split in ["train", "val"] {
        for sub in ["images", "labels"] {
            let (x, y) = (files_in(&out.join(split).join(sub)), files_in(&again.join(split).join(sub)));
            assert_eq!(x.len(), y.len());
            for (p, q) in x.iter().zip(&y) {
                assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
            }
        }
    }
}

#[test]
fn manifest_lines_match_directory_scan() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.image_size = 32;
    cfg.train_size = 100;
    commands::gen_data(&cfg, dir.path()).unwrap();
    let train = dir.path().join("train");
    let manifest = fs::read_to_string(train.join(MANIFEST)).unwrap();
    let images = files_in(&train.join("images"));
    let labels = files_in(&train.join("labels"));
    assert_eq!(manifest.lines().count(), images.len());
    assert_eq!(images.len(), labels.len());
    for line in manifest.lines() {
        let (img, lab) = line.split_once('\t').unwrap();
        assert!(images.contains(&train.join(img)) && labels.contains(&train.join(lab)));
    }
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let report = run_train(&cfg, &TrainOptions { stop_at: Some(0), resume: None }, dir.path()).unwrap();
    assert!(report.log.is_empty());
    let ck = Checkpoint::load(&report.checkpoint).unwrap();
    let init = commands::build_model(&cfg).unwrap();
    assert_eq!(ck.iteration().unwrap(), 0);
    for (name, slot) in init.slots() {
        let e = ck.get(&name).unwrap();
        assert_eq!(e.dims, slot.shape());
        assert_eq!(e.data, slot.get().to_vec(), "{name}");
    }
}

#[test]
fn logged_lr_follows_the_poly_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let report = run_train(&cfg, &TrainOptions::default(), dir.path()).unwrap();
    assert_eq!(report.log.len(), 10);
    assert_eq!(report.log[0].lr, cfg.schedule.base_lr);
    let last = report.log.last().unwrap();
    assert_eq!(last.iteration, 9);
    // base · (1/10)^0.9
    assert!((last.lr - 0.1 * 0.1f64.powf(0.9)).abs() < 1e-12);
    assert!(report.log.windows(2).all(|w| w[1].lr < w[0].lr));
    assert!(last.val_miou.is_some());

    let tsv = fs::read_to_string(dir.path().join(commands::LOG_FILE)).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], commands::LOG_HEADER);
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("0\t0.1\t"));
}

#[test]
fn shipped_config_reproduces_the_reference_loss() {
    let root = repo_root();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(&root.join("configs/toy.conf")).unwrap();
    cfg.data_dir = dir.path().join("data");
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let report = run_train(&cfg, &TrainOptions { stop_at: Some(200), resume: None }, dir.path()).unwrap();

    let reference = fs::read_to_string(root.join("configs/toy_reference.tsv")).unwrap();
    let row: Vec<&str> = reference.lines().nth(1).unwrap().split('\t').collect();
    let (iters, loss): (usize, f64) = (row[0].parse().unwrap(), row[1].parse().unwrap());
    assert_eq!(report.log.len(), iters);
    let got = report.log.last().unwrap().loss;
    assert!((got - loss).abs() < 1e-6, "final loss {got}, reference {loss}");
}

/// Two 128×128 training images and 300 iterations: enough to memorize them.
/// At 64×64 the stride-8 logits leave too many boundary pixels for a clear margin.
fn overfit(dir: &Path) -> (RunConfig, PathBuf) {
    let text = "image_size = 128\ntrain_size = 2\nval_size = 1\nbatch_size = 2\niterations = 300\n\
                weight_decay = 0\neval_every = 0\n";
    let cfg = RunConfig::parse(text, dir).unwrap();
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let report = run_train(&cfg, &TrainOptions::default(), &dir.join("run")).unwrap();
    (cfg, report.checkpoint)
}

#[test]
fn eval_behaviour_on_an_overfit_run() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, ck) = overfit(dir.path());
    let train_manifest = cfg.train_manifest();
    let on_train = EvalOptions {
        manifest: Some(train_manifest.clone()),
        single_scale: true,
    };
    let r = commands::eval(&cfg, &ck, &on_train).unwrap();
    assert!(r.mean_iou > 0.95, "overfit mIoU {}", r.mean_iou);

    // ms+flip reduced to one scale without flip is the single-scale path
    cfg.eval_scales = vec![1.0];
    cfg.flip = false;
    let configured = EvalOptions {
        single_scale: false,
        ..on_train.clone()
    };
    assert_eq!(commands::eval(&cfg, &ck, &configured).unwrap(), r);

    // reversed manifest order
    let text = fs::read_to_string(&train_manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.reverse();
    let permuted = train_manifest.with_file_name("permuted.tsv");
    fs::write(&permuted, lines.join("\n") + "\n").unwrap();
    let opts = EvalOptions {
        manifest: Some(permuted),
        single_scale: true,
    };
    assert_eq!(commands::eval(&cfg, &ck, &opts).unwrap(), r);

    // full ms+flip still reads the checkpoint and scores in range
    cfg.eval_scales = vec![0.75, 1.0, 1.25];
    cfg.flip = true;
    let ms = commands::eval(&cfg, &ck, &configured).unwrap();
    assert!(ms.mean_iou > 0.5 && ms.mean_iou <= 1.0);

    cfg.num_classes = 3;
    let err = commands::eval(&cfg, &ck, &on_train).unwrap_err();
    assert!(matches!(err, CliError::Core(ocnet_core::Error::Contract(_))), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let report = run_train(&cfg, &TrainOptions { stop_at: Some(3), resume: None }, dir.path()).unwrap();
    let bytes = fs::read(&report.checkpoint).unwrap();
    let copy = dir.path().join("copy.ocn");
    Checkpoint::load(&report.checkpoint).unwrap().save(&copy).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), bytes);
    let ck = Checkpoint::load(&copy).unwrap();
    assert_eq!(ck.iteration().unwrap(), 3);
    assert_eq!(ck.seed().unwrap(), Some(cfg.seed));
    assert!(ck.entries.iter().any(|e| e.name.starts_with("__opt__/")));
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.module = ContextKind::AspOc;
    cfg.dilation_rates = vec![1, 2, 3];
    cfg.augment = true;
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let full = run_train(&cfg, &TrainOptions::default(), &dir.path().join("full")).unwrap();
    let half = run_train(&cfg, &TrainOptions { stop_at: Some(5), resume: None }, &dir.path().join("half")).unwrap();
    let resumed = TrainOptions {
        stop_at: None,
        resume: Some(half.checkpoint.clone()),
    };
    let rest = run_train(&cfg, &resumed, &dir.path().join("rest")).unwrap();
    assert_eq!(fs::read(&full.checkpoint).unwrap(), fs::read(&rest.checkpoint).unwrap());
    assert_eq!(&full.log[5..], &rest.log[..]);

    // a different seed must not silently continue someone else's run
    cfg.seed += 1;
    let err = run_train(&cfg, &resumed, &dir.path().join("other")).unwrap_err();
    assert!(matches!(err, CliError::Checkpoint(_)));
}

fn zero_query(model: &ocnet_core::model::SegModel<f32>) {
    let ContextModule::BaseOc(m) = &model.context else {
        panic!("expected base-oc")
    };
    let w = &m.ocp.query.weight;
    w.set_data(vec![0.0; w.get().numel()]).unwrap();
    if let Some(b) = &m.ocp.query.bias {
        b.set_data(vec![0.0; b.get().numel()]).unwrap();
    }
}

#[test]
fn zeroed_query_renders_a_uniform_black_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let model = commands::build_model(&cfg).unwrap();
    zero_query(&model);
    let ck_path = dir.path().join(CHECKPOINT_FILE);
    Checkpoint::of_model(&model).save(&ck_path).unwrap();
    commands::gen_data(&cfg, &cfg.data_dir).unwrap();
    let image = cfg.data_dir.join("val/images/00000.ppm");
    let out = dir.path().join("vis");
    let files = visualize(&cfg, &ck_path, &image, &[(0, 0), (9, 14)], &out).unwrap();
    assert_eq!(files.len(), 4);
    let (h, w, gray) = ocnet_core::data::read_pgm(&out.join("ocmap_y9_x14.pgm")).unwrap();
    assert_eq!((h, w), (16, 16));
    assert!(gray.iter().all(|&v| v == 0));
    let (_, _, marked) = ocnet_core::data::read_ppm(&out.join("query_y9_x14.ppm")).unwrap();
    assert_eq!((marked[9 * 16 + 14], marked[256 + 9 * 16 + 14]), (1.0, 0.0));

    let err = visualize(&cfg, &ck_path, &image, &[(16, 0)], &out).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn single_cell_feature_map_gives_a_single_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.image_size = 8;
    let model = commands::build_model(&cfg).unwrap();
    let data = ocnet_core::data::generate_shapes(3, 1, &cfg.synth_config()).unwrap();
    let (x, _) = batch_tensor::<f32>(&[&data.samples[0]]).unwrap();
    let maps = heatmaps(&model, &x, &[(4, 4)]).unwrap();
    assert_eq!(maps[0].weights, vec![1.0]);
    assert_eq!(maps[0].pixels, vec![0; 64]);
}

#[test]
fn heatmaps_need_an_object_context_module() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.module = ContextKind::Baseline;
    let model = commands::build_model(&cfg).unwrap();
    let x = ocnet_core::tensor::Tensor::zeros(&[1, 3, 16, 16]);
    let err = heatmaps(&model, &x, &[(0, 0)]).unwrap_err();
    assert!(matches!(err, CliError::Core(ocnet_core::Error::Contract(_))));
}

#[test]
fn gradcheck_command_reports_and_rejects() {
    let mut out = Vec::new();
    assert!(commands::gradcheck("softmax", 3, &mut out).unwrap());
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().count() >= 3 && text.lines().all(|l| l.ends_with("\tok")));
    let err = commands::gradcheck("nope", 3, &mut Vec::new()).unwrap_err();
    assert!(matches!(err, CliError::Usage(ref m) if m.contains("softmax") && m.contains("asp-oc")));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ocnet");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).current_dir(dir.path()).output().unwrap();

    let out = run(&["gradcheck", "ocp"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).ends_with("PASS\n"));

    let out = run(&["gradcheck", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pyramid-oc"));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));

    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 3\nwidth = 9\n").unwrap();
    let out = run(&["--config", conf.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    // missing dataset is a run-time failure
    let out = run(&["train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));

    let conf = dir.path().join("ok.conf");
    fs::write(&conf, "train_size = 2\nval_size = 1\nimage_size = 16\n").unwrap();
    let out = run(&["--config", conf.to_str().unwrap(), "gen-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(load_manifest(&dir.path().join("d/train").join(MANIFEST), 4).unwrap().len(), 2);
}

fn line_strategy() -> impl Strategy<Value = String> {
    let key = prop::sample::select(RunConfig::KEYS.to_vec());
    let value = prop::sample::select(vec![
        "0", "1", "2", "7", "16", "0.5", "-1", "true", "off", "auto", "1, 2", "x", "", "base-oc", "asp-oc", "data",
    ]);
    prop_oneof![
        8 => (key, value).prop_map(|(k, v)| format!("{k} = {v}")),
        1 => Just("# comment".to_string()),
        1 => Just(String::new()),
        1 => Just("no equals sign".to_string()),
        1 => Just("mystery = 1".to_string()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn config_parsing_is_total(lines in prop::collection::vec(line_strategy(), 0..12)) {
        let text = lines.join("\n");
        let base = Path::new("/cfg");
        match RunConfig::parse(&text, base) {
            Ok(cfg) => {
                // fully populated: rendering and reparsing loses nothing
                prop_assert_eq!(RunConfig::parse(&cfg.to_text(), base).unwrap(), cfg);
            }
            Err(e) => {
                prop_assert!(e.line >= 1 && e.line <= lines.len());
                // the file up to the line before the offending one is accepted
                let prefix = lines[..e.line - 1].join("\n");
                prop_assert!(RunConfig::parse(&prefix, base).is_ok());
            }
        }
    }
}
