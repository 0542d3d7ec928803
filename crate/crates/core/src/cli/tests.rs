use std::fs;
use std::path::{Path, PathBuf};

use super::data::{Manifest, Split};
use super::render::{cell_to_pixel, render_bev, Palette};
use super::*;
use crate::occgrid::{read_sequence_file, write_sequence_file, EgoPose, OccGrid, OccSequence, VEHICLE};

fn code(args: &[&str]) -> i32 {
    let mut v = vec!["occworld"];
    v.extend_from_slice(args);
    main_with_args(v)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|f| (f.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&f).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

const TINY: &str = "\
tokenizer.grid=16x16x2
tokenizer.d=4
tokenizer.C=8
tokenizer.N=16
tokenizer.hidden=8
tokenizer.Cprime=2
tokenizer.steps=200
tokenizer.batch=1
tokenizer.eval_every=50
world.K=1
world.layers_per_scale=1
world.heads=1
world.mlp_ratio=1
world.history_frames=2
world.future_frames=6
world.steps=60
world.batch=1
world.eval_every=20
world.lr=3e-3
";

/// One static scene listed in both the train and val splits.
fn static_dataset(root: &Path) -> PathBuf {
    let d = root.join("static");
    assert_eq!(
        code(&["gen-data", "--out", p(&d), "--scenes", "1", "--frames", "10", "--grid", "16x16x2", "--kind", "static", "--seed", "5"]),
        0
    );
    let mut m = Manifest::read(&d).unwrap();
    let mut e = m.entries[0].clone();
    m.entries[0].split = Split::Train;
    e.split = Split::Val;
    m.entries.push(e);
    m.write(&d).unwrap();
    d
}

#[test]
fn gen_data_is_deterministic_and_handles_empty() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let args = ["gen-data", "--out", p(d), "--scenes", "10", "--frames", "12", "--seed", "7", "--grid", "16x16x4"];
        assert_eq!(code(&args), 0);
    }
    let (ra, rb) = (read_dir_bytes(&a), read_dir_bytes(&b));
    // The snapshots differ only in the recorded output path.
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<_> { v.into_iter().filter(|(f, _)| f != Path::new("config.txt")).collect() };
    assert_eq!(strip(ra), strip(rb));
    let m = Manifest::read(&a).unwrap();
    assert_eq!(m.entries.len(), 10);
    for e in &m.entries {
        let seq = read_sequence_file(&a.join(&e.file)).unwrap();
        assert_eq!(seq.len(), 12);
        assert_eq!(seq.dims(), [16, 16, 4]);
        assert_eq!(e.split, split_of(e.seed));
    }

    let empty = t.path().join("empty");
    assert_eq!(code(&["gen-data", "--out", p(&empty), "--scenes", "0"]), 0);
    assert!(Manifest::read(&empty).unwrap().entries.is_empty());
}

#[test]
fn grid_flag_grammar() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("g");
    assert_eq!(crate::config::parse_dims::<3>("64x64x8").unwrap(), [64, 64, 8]);
    assert_eq!(code(&["gen-data", "--out", p(&out), "--scenes", "0", "--grid", "64x64"]), 2);
    match run(["occworld", "gen-data", "--out", p(&out), "--grid", "64x64"]) {
        Err(CliError::Usage(msg)) => assert!(msg.contains("--grid"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn split_is_roughly_80_10_10() {
    let mut counts = [0usize; 3];
    for s in 0..10_000u64 {
        counts[split_of(s) as usize] += 1;
    }
    assert!((7_700..8_300).contains(&counts[0]), "{counts:?}");
    assert!((800..1_200).contains(&counts[1]), "{counts:?}");
    assert!((800..1_200).contains(&counts[2]), "{counts:?}");
}

#[test]
fn unknown_keys_and_missing_flags_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.txt");
    fs::write(&cfg, "tokenizer.d=4\nworld.bogus=1\n").unwrap();
    assert_eq!(code(&["gen-data", "--out", p(t.path()), "--config", p(&cfg)]), 2);
    assert_eq!(code(&["gen-data", "--out", p(t.path()), "--set", "run.seed"]), 2);
    assert_eq!(code(&["train-world", "--data", p(t.path()), "--out", p(t.path())]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["gen-data", "--scenes", "1"]), 2, "no output location");
    assert_eq!(code(&["train-tokenizer", "--data", p(&t.path().join("missing")), "--out", p(t.path())]), 3);
}

#[test]
fn train_rollout_eval_on_a_static_world() {
    let t = tempfile::tempdir().unwrap();
    let data = static_dataset(t.path());
    let cfg = t.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let tok = t.path().join("tok");
    let world = t.path().join("world");
    let args = ["train-tokenizer", "--config", p(&cfg), "--data", p(&data), "--out", p(&tok), "--deterministic"];
    assert_eq!(code(&args), 0);
    let tok_ck = tok.join("checkpoint");
    let args = ["train-world", "--config", p(&cfg), "--data", p(&data), "--tokenizer", p(&tok_ck), "--out", p(&world)];
    assert_eq!(code(&args), 0);

    // One log line per eval interval, with the contract keys.
    for (dir, lines) in [(&tok, 4), (&world, 3)] {
        let log = fs::read_to_string(dir.join("metrics.log")).unwrap();
        assert_eq!(log.lines().count(), lines, "{log}");
        for l in log.lines() {
            for key in ["epoch=", "loss=", "miou="] {
                assert!(l.contains(key), "{l}");
            }
        }
        let snap = fs::read_to_string(dir.join("config.txt")).unwrap();
        assert!(snap.contains("tokenizer.N=16") && snap.contains("# command: occworld train-"), "{snap}");
    }

    // The snapshot alone reproduces the run.
    let rerun = t.path().join("tok2");
    let snap = tok.join("config.txt");
    let args = ["train-tokenizer", "--config", p(&snap), "--data", p(&data), "--out", p(&rerun)];
    assert_eq!(code(&args), 0);
    assert_eq!(read_dir_bytes(&tok_ck), read_dir_bytes(&rerun.join("checkpoint")));

    let input = data.join("scene-0000.occseq");
    let seq = read_sequence_file(&input).unwrap();
    let w_ck = world.join("checkpoint");
    let out = t.path().join("roll");
    let args = ["rollout", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--input", p(&input), "--steps", "6", "--out", p(&out)];
    assert_eq!(code(&args), 0);
    let forecast = read_sequence_file(&out.join("forecast.occseq")).unwrap();
    assert_eq!(forecast.len(), 6);
    let last = seq.grid(seq.len() - 1);
    for g in forecast.grids() {
        assert_eq!(g, last);
    }
    let mut bytes = Vec::new();
    crate::occgrid::save_sequence(&forecast, &mut bytes).unwrap();
    assert_eq!(bytes, fs::read(out.join("forecast.occseq")).unwrap());
    let table = fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(commands::parse_trajectory_table(&table).unwrap().len(), 6);

    // A window shorter than the model's history is a data mismatch.
    let short = t.path().join("short.occseq");
    write_sequence_file(&seq.window(0, 2).unwrap(), &short).unwrap();
    let args = ["rollout", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--input", p(&short), "--out", p(&out)];
    assert_eq!(code(&args), 5);

    let ev = t.path().join("eval");
    let args = [
        "eval", "--data", p(&data), "--split", "val", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--l2-mode", "both",
        "--out", p(&ev),
    ];
    assert_eq!(code(&args), 0);
    let kv = fs::read_to_string(ev.join("report.kv")).unwrap();
    assert!(kv.contains("occworld.miou.avg=100.000000"), "{kv}");
    assert!(kv.contains("occworld.l2_at-horizon.avg=") && kv.contains("occworld.l2_averaged.avg="), "{kv}");

    // Predictions written by rollout score identically through --predictions.
    let preds = t.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    let hist = t.path().join("hist.occseq");
    write_sequence_file(&seq.window(0, 3).unwrap(), &hist).unwrap();
    let r2 = t.path().join("roll2");
    let args = ["rollout", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--input", p(&hist), "--out", p(&r2)];
    assert_eq!(code(&args), 0);
    fs::copy(r2.join("forecast.occseq"), preds.join("scene-0000.occseq")).unwrap();
    let ev2 = t.path().join("eval2");
    let args = [
        "eval", "--data", p(&data), "--split", "val", "--predictions", p(&preds), "--set", "world.history_frames=2",
        "--out", p(&ev2),
    ];
    assert_eq!(code(&args), 0);
    let kv2 = fs::read_to_string(ev2.join("report.kv")).unwrap();
    assert!(kv2.contains("samples=1\n") && kv2.contains("occworld.miou.avg=100.000000"), "{kv2}");

    // A tokenizer built for another grid does not match the data.
    let args = ["eval", "--data", p(&data), "--split", "val", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--out", p(&ev)];
    let other = t.path().join("big");
    assert_eq!(code(&["gen-data", "--out", p(&other), "--scenes", "3", "--frames", "10", "--grid", "32x32x2", "--kind", "static"]), 0);
    let mut m = Manifest::read(&other).unwrap();
    m.entries.iter_mut().for_each(|e| e.split = Split::Val);
    m.write(&other).unwrap();
    let mut bad = args.to_vec();
    bad[2] = p(&other);
    assert_eq!(code(&bad), 5);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&["gen-data", "--out", p(&data), "--scenes", "6", "--frames", "10", "--grid", "16x16x2", "--seed", "3"]), 0);
    let mut m = Manifest::read(&data).unwrap();
    for (i, e) in m.entries.iter_mut().enumerate() {
        e.split = if i < 4 { Split::Train } else { Split::Val };
    }
    m.write(&data).unwrap();
    let cfg = t.path().join("tiny.txt");
    fs::write(&cfg, TINY.replace("tokenizer.steps=200", "tokenizer.steps=10").replace("world.steps=60", "world.steps=6")).unwrap();
    let mut outs = Vec::new();
    for k in 0..2 {
        let run_dir = t.path().join(format!("run{k}"));
        let tok = run_dir.join("tok");
        let args = ["train-tokenizer", "--config", p(&cfg), "--data", p(&data), "--out", p(&tok), "--deterministic", "--seed", "9"];
        assert_eq!(code(&args), 0);
        let tok_ck = tok.join("checkpoint");
        let world = run_dir.join("world");
        let args = [
            "train-world", "--config", p(&cfg), "--data", p(&data), "--tokenizer", p(&tok_ck), "--out", p(&world), "--deterministic",
            "--seed", "9",
        ];
        assert_eq!(code(&args), 0);
        let w_ck = world.join("checkpoint");
        let roll = run_dir.join("roll");
        let input = data.join("scene-0000.occseq");
        let args = ["rollout", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--input", p(&input), "--out", p(&roll)];
        assert_eq!(code(&args), 0);
        let ev = run_dir.join("eval");
        let args = [
            "eval", "--data", p(&data), "--split", "val", "--world", p(&w_ck), "--tokenizer", p(&tok_ck), "--out", p(&ev),
            "--deterministic",
        ];
        assert_eq!(code(&args), 0);
        let img = run_dir.join("f.ppm");
        assert_eq!(code(&["render", "--input", p(&roll.join("forecast.occseq")), "--frame", "2", "--out", p(&img)]), 0);
        outs.push([
            read_dir_bytes(&tok_ck),
            read_dir_bytes(&w_ck),
            vec![(PathBuf::new(), fs::read(roll.join("forecast.occseq")).unwrap())],
            vec![(PathBuf::new(), fs::read(roll.join("trajectory.txt")).unwrap())],
            vec![(PathBuf::new(), fs::read(ev.join("report.txt")).unwrap())],
            vec![(PathBuf::new(), fs::read(ev.join("report.kv")).unwrap())],
            vec![(PathBuf::new(), fs::read(&img).unwrap())],
        ]);
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn baseline_only_on_static_scenes_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&["gen-data", "--out", p(&data), "--scenes", "4", "--frames", "12", "--grid", "16x16x2", "--kind", "static"]), 0);
    let mut m = Manifest::read(&data).unwrap();
    m.entries.iter_mut().for_each(|e| e.split = Split::Test);
    m.write(&data).unwrap();
    let ev = t.path().join("e");
    assert_eq!(code(&["eval", "--data", p(&data), "--baseline-only", "--l2-mode", "both", "--out", p(&ev)]), 0);
    let kv = fs::read_to_string(ev.join("report.kv")).unwrap();
    for h in ["1s", "2s", "3s", "avg"] {
        assert!(kv.contains(&format!("copy_paste.miou.{h}=100.000000")), "{kv}");
        assert!(kv.contains(&format!("stationary.l2_at-horizon.{h}=0.000000")), "{kv}");
        assert!(kv.contains(&format!("stationary.l2_averaged.{h}=0.000000")), "{kv}");
    }
    let text = fs::read_to_string(ev.join("report.txt")).unwrap();
    let header = text.lines().find(|l| l.starts_with("metric")).unwrap();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["metric", "1s", "2s", "3s", "Avg"]);

    // Without a model, the window length follows world.history_frames; too
    // long a window leaves no sample.
    assert_eq!(code(&["eval", "--data", p(&data), "--baseline-only", "--set", "world.history_frames=9", "--out", p(&ev)]), 5);
    assert_eq!(code(&["eval", "--data", p(&data), "--out", p(&ev)]), 2);
}

#[test]
fn report_average_is_mean_of_horizons() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    assert_eq!(code(&["gen-data", "--out", p(&data), "--scenes", "4", "--frames", "14", "--grid", "32x32x4", "--seed", "11"]), 0);
    let mut m = Manifest::read(&data).unwrap();
    m.entries.iter_mut().for_each(|e| e.split = Split::Test);
    m.write(&data).unwrap();
    let ev = t.path().join("e");
    assert_eq!(code(&["eval", "--data", p(&data), "--baseline-only", "--l2-mode", "both", "--out", p(&ev)]), 0);
    let kv = fs::read_to_string(ev.join("report.kv")).unwrap();
    let get = |k: &str| -> f64 {
        kv.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap_or_else(|| panic!("{k} missing"))
            .parse()
            .unwrap()
    };
    for metric in ["copy_paste.miou", "copy_paste.iou", "stationary.l2_at-horizon", "stationary.l2_averaged"] {
        let mean = (get(&format!("{metric}.1s")) + get(&format!("{metric}.2s")) + get(&format!("{metric}.3s"))) / 3.0;
        assert!((mean - get(&format!("{metric}.avg"))).abs() < 1e-5, "{metric}");
    }
}

fn parse_ppm(bytes: &[u8]) -> (usize, usize, &[u8]) {
    let text = std::str::from_utf8(&bytes[..15.min(bytes.len())]).unwrap_or("");
    let mut parts = text.split_ascii_whitespace();
    assert_eq!(parts.next(), Some("P6"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    let body = &bytes[header.len()..];
    assert_eq!(body.len(), w * h * 3);
    (w, h, body)
}

#[test]
fn renders_free_frames_and_blocks() {
    let t = tempfile::tempdir().unwrap();
    let free = OccGrid::empty([12, 20, 3], 6).unwrap();
    let mut block = free.clone();
    // A vehicle at h 2..5, w 10..14, two voxels tall.
    for h in 2..5 {
        for w in 10..14 {
            block.set(h, w, 0, VEHICLE);
            block.set(h, w, 1, VEHICLE);
        }
    }
    let seq = OccSequence::new(vec![(free, EgoPose::default()), (block, EgoPose::default())], 500).unwrap();
    let input = t.path().join("s.occseq");
    write_sequence_file(&seq, &input).unwrap();
    let palette = Palette::default();

    let out = t.path().join("free.ppm");
    assert_eq!(code(&["render", "--input", p(&input), "--frame", "0", "--out", p(&out)]), 0);
    let bytes = fs::read(&out).unwrap();
    let (w, h, body) = parse_ppm(&bytes);
    assert_eq!((w, h), (20, 12));
    assert!(body.chunks(3).all(|c| c == palette.color(0)));

    let out = t.path().join("block.ppm");
    assert_eq!(code(&["render", "--input", p(&input), "--frame", "1", "--out", p(&out)]), 0);
    let bytes = fs::read(&out).unwrap();
    let (w, _, body) = parse_ppm(&bytes);
    // Forward is up and left is left: h 2..5 → rows 7..10, w 10..14 → cols 6..10.
    for r in 0..12 {
        for c in 0..20 {
            let px = &body[(r * w + c) * 3..(r * w + c) * 3 + 3];
            let inside = (7..10).contains(&r) && (6..10).contains(&c);
            let want = if inside { palette.color(VEHICLE) } else { palette.color(0) };
            assert_eq!(px, want, "pixel ({r}, {c})");
        }
    }
    assert_eq!(cell_to_pixel([12, 20, 3], 2, 10), (9, 9));
    assert_eq!(code(&["render", "--input", p(&input), "--frame", "2", "--out", p(&out)]), 5);
}

#[test]
fn waypoint_markers_and_scaling() {
    let mut g = OccGrid::empty([10, 10, 1], 6).unwrap().with_voxel_size(1.0);
    g.set(0, 0, 0, 3);
    let palette = Palette::default();
    // (1.5, -2.5) m sits in cell h = 6, w = 2 → pixel row 3, col 7.
    let img = render_bev(&g, &[[1.5, -2.5], [100.0, 0.0]], &palette, 2);
    let (w, h, body) = parse_ppm(&img);
    assert_eq!((w, h), (20, 20));
    let at = |r: usize, c: usize| &body[(r * w + c) * 3..(r * w + c) * 3 + 3];
    for (r, c) in [(6, 14), (7, 15)] {
        assert_eq!(at(r, c), palette.marker);
    }
    assert_eq!(at(19, 19), palette.color(3));
    assert_eq!(body.chunks(3).filter(|c| *c == palette.marker).count(), 4);
}

#[test]
fn gradcheck_command_exit_codes() {
    assert_eq!(code(&["gradcheck"]), 0);
    match run(["occworld", "gradcheck", "--fault", "gelu"]) {
        Err(e @ CliError::Check(_)) => {
            assert_eq!(e.exit_code(), 6);
            assert!(e.to_string().contains("failed in gelu"), "{e}");
        }
        other => panic!("{other:?}"),
    }
    // Below the finite-difference noise floor every check fails.
    assert_eq!(code(&["gradcheck", "--threshold", "1e-12"]), 6);
    assert_eq!(code(&["gradcheck", "--fault", "nonsense"]), 2);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    use crate::error::Error;
    let cases = [
        (Error::config("x"), 2),
        (Error::Io(std::io::Error::other("x")), 3),
        (Error::Format("x".into()), 3),
        (Error::Divergence("x".into()), 4),
        (Error::NonFinite("x".into()), 4),
        (Error::Length("x".into()), 5),
        (Error::Validation("x".into()), 5),
    ];
    for (e, c) in cases {
        assert_eq!(CliError::from(e).exit_code(), c);
    }
}
