mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use longvid::cli::format;
use longvid::ResolutionLevel;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_longvid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn longvid")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_query(path: &Path, l_q: usize, d: usize, seed: u64) {
    let q = common::random_query(seed, l_q, d);
    std::fs::write(path, format::encode_query(&q).unwrap()).unwrap();
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = p(dir, name);
    let mut args = vec!["synth", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn synth_zero_noise_gives_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    let f = synth(
        dir.path(),
        "v.lvuf",
        &["--frames", "8", "--scenes", "1", "--noise", "0"],
    );
    let v = format::read_features(&f).unwrap();
    assert_eq!(v.len(), 8);
    assert!(v.frames().iter().all(|g| g == &v.frames()[0]));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.lvuf", &["--frames", "40", "--seed", "7"]);
    let b = synth(dir.path(), "b.lvuf", &["--frames", "40", "--seed", "7"]);
    let c = synth(dir.path(), "c.lvuf", &["--frames", "40", "--seed", "8"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn synth_hour_long_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let f = synth(
        dir.path(),
        "hour.lvuf",
        &[
            "--frames", "3600", "--scenes", "40", "--dim", "32", "--grid", "12x12",
        ],
    );
    assert_eq!(
        std::fs::metadata(&f).unwrap().len(),
        28 + 3600 * 144 * 32 * 4
    );
}

#[test]
fn synth_rejects_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "x.lvuf");
    let o = run(&["synth", "--frames", "4", "--scenes", "9", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn compress_defaults_honor_budget() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth(
        dir.path(),
        "v.lvuf",
        &["--frames", "600", "--scenes", "6", "--seed", "2"],
    );
    let q = p(dir.path(), "q.lvuq");
    write_query(&q, 40, 32, 1);
    let out = p(dir.path(), "o.lvuc");
    let stats = p(dir.path(), "s.json");
    let o = run(&[
        "compress",
        "--input",
        s(&v),
        "--query",
        s(&q),
        "--output",
        s(&out),
        "--stats",
        s(&stats),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let file = format::read_compressed(&out).unwrap();
    assert!(file.tokens.total_count() <= 8192 - 40);
    assert_eq!(file.tokens.total_count(), file.stats.tokens_final);
    let json: Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    assert_eq!(json["tokens_final"], file.stats.tokens_final);
    assert_eq!(json["frames_in"], 600);
}

#[test]
fn compress_all_stages_disabled_is_raw() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth(dir.path(), "v.lvuf", &["--frames", "80", "--dim", "4"]);
    let q = p(dir.path(), "q.lvuq");
    write_query(&q, 8, 4, 3);
    let out = p(dir.path(), "o.lvuc");
    let o = run(&[
        "compress",
        "--input",
        s(&v),
        "--query",
        s(&q),
        "--output",
        s(&out),
        "--context-length",
        "2000",
        "--disable-stage",
        "temporal",
        "--disable-stage",
        "query",
        "--disable-stage",
        "stc",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let file = format::read_compressed(&out).unwrap();
    let video = format::read_features(&v).unwrap();
    assert_eq!(file.tokens.total_count(), 80 * 144);
    assert_eq!(file.stats.total_reduction_rate, 0.0);
    assert!(!file.stats.stc_applied && !file.stats.fallback_used);
    for (i, t) in file.tokens.tokens.iter().enumerate() {
        let (f, pos) = (i / 144, i % 144);
        assert_eq!(t.frame_original_index, f);
        assert_eq!((t.grid_h, t.grid_w), (pos / 12, pos % 12));
        assert_eq!(t.level, ResolutionLevel::Full);
        assert_eq!(
            t.vector.as_slice(),
            video.frames()[f].token(pos / 12, pos % 12)
        );
    }
}

#[test]
fn compress_fpe_on_shifts_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth(dir.path(), "v.lvuf", &["--frames", "20", "--dim", "8"]);
    let q = p(dir.path(), "q.lvuq");
    write_query(&q, 4, 8, 3);
    let off = p(dir.path(), "off.lvuc");
    let on = p(dir.path(), "on.lvuc");
    let base = ["compress", "--input", s(&v), "--query", s(&q)];
    assert_eq!(code(&run(&[&base[..], &["--output", s(&off)]].concat())), 0);
    assert_eq!(
        code(&run(
            &[&base[..], &["--output", s(&on), "--fpe", "on"]].concat()
        )),
        0
    );
    let a = format::read_compressed(&off).unwrap().tokens;
    let b = format::read_compressed(&on).unwrap().tokens;
    assert_eq!(a.total_count(), b.total_count());
    for (x, y) in a.tokens.iter().zip(&b.tokens) {
        let pe = longvid::fpe_vector(x.timestep, 8, 10000.0);
        for i in 0..8 {
            let want = x.vector.as_slice()[i] + pe.as_slice()[i];
            assert!((y.vector.as_slice()[i] - want).abs() < 1e-5);
        }
    }
}

#[test]
fn theta_out_of_range_exits_3_naming_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "compress",
        "--input",
        "a",
        "--query",
        "b",
        "--output",
        s(&p(dir.path(), "o")),
        "--theta",
        "1.5",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--theta"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_3() {
    for args in [
        &[
            "compress", "--input", "a", "--query", "b", "--output", "c", "--tau-t", "0",
        ][..],
        &[
            "compress",
            "--input",
            "a",
            "--query",
            "b",
            "--output",
            "c",
            "--tokens-high",
            "12",
        ],
        &[
            "compress", "--input", "a", "--query", "b", "--output", "c", "--anchor", "last",
        ],
        &[
            "compress",
            "--input",
            "a",
            "--query",
            "b",
            "--output",
            "c",
            "--window-k",
            "0",
        ],
        &[
            "compress",
            "--input",
            "a",
            "--query",
            "b",
            "--output",
            "c",
            "--tokens-low",
            "12x12",
        ],
        &["report", "--out", "x", "--corpus-size", "0"],
        &["frobnicate"],
    ] {
        let o = run(args);
        assert_eq!(code(&o), 3, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth(dir.path(), "v.lvuf", &["--frames", "10", "--dim", "8"]);
    let q = p(dir.path(), "q.lvuq");
    write_query(&q, 4, 8, 3);
    let q_wrong = p(dir.path(), "q16.lvuq");
    write_query(&q_wrong, 4, 16, 3);
    let truncated = p(dir.path(), "t.lvuf");
    let bytes = std::fs::read(&v).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let out = p(dir.path(), "o.lvuc");
    let missing = p(dir.path(), "missing.lvuf");
    for (input, query) in [
        (&v, &v),
        (&truncated, &q),
        (&v, &q_wrong),
        (&missing, &q),
        (&q, &q),
    ] {
        let o = run(&[
            "compress",
            "--input",
            s(input),
            "--query",
            s(query),
            "--output",
            s(&out),
        ]);
        assert_eq!(code(&o), 2, "{input:?} {query:?}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn infeasible_budget_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth(
        dir.path(),
        "v.lvuf",
        &["--frames", "400", "--scenes", "40", "--dim", "8"],
    );
    let q = p(dir.path(), "q.lvuq");
    write_query(&q, 4, 8, 3);
    let out = p(dir.path(), "o.lvuc");
    let o = run(&[
        "compress",
        "--input",
        s(&v),
        "--query",
        s(&q),
        "--output",
        s(&out),
        "--context-length",
        "10",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn needle_csv_rows_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = p(dir.path(), "n.csv");
    let json = p(dir.path(), "n.json");
    let o = run(&[
        "needle",
        "--frame-counts",
        "200",
        "--depths",
        "0,1",
        "--report",
        s(&csv),
        "--json",
        s(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "frame_count,depth,needle_full_res,needle_tokens_kept_fraction,any_token_survives"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("200,0.0,"));
    assert!(lines[2].starts_with("200,1.0,"));
    let summary: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(summary["aggregate"]["runs"], 2);
    for cell in summary["cells"].as_array().unwrap() {
        // whenever any frame kept full resolution, the aligned needle was among them
        if cell["mean_n_h"].as_f64().unwrap() >= 1.0 {
            assert_eq!(cell["needle_full_res"].as_f64().unwrap(), 1.0);
        }
        assert_eq!(cell["any_token_survives"].as_f64().unwrap(), 1.0);
    }
}

#[test]
fn needle_default_grid_has_all_cells() {
    let dir = tempfile::tempdir().unwrap();
    let csv = p(dir.path(), "n.csv");
    let o = run(&["needle", "--report", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(rows, 6 * 5);
}

#[test]
fn needle_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = p(dir.path(), "n.csv");
    for bad in [
        &["--depths", "0,1.5"][..],
        &["--depths", "1,0"],
        &["--frame-counts", "0"],
        &["--alignment", "2"],
    ] {
        let o = run(&[&["needle", "--report", s(&csv)][..], bad].concat());
        assert_eq!(code(&o), 3, "{bad:?}");
    }
}

#[test]
fn report_static_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "r.json");
    let csv = p(dir.path(), "r.csv");
    let o = run(&[
        "report",
        "--corpus",
        "static",
        "--corpus-size",
        "6",
        "--seed",
        "1",
        "--out",
        s(&out),
        "--csv",
        s(&csv),
        "--anchor-ablation",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let keep = json["mean_frames_kept"].as_f64().unwrap();
    assert!((keep - 0.125).abs() < 0.02, "{keep}");
    assert!(json["mean_tokens_reduced"].is_f64());
    assert_eq!(
        json["frames_kept_histogram"]["counts"]
            .as_array()
            .unwrap()
            .len(),
        10
    );
    assert_eq!(json["anchor_ablation"].as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 7);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("| high-change |"), "{stdout}");
}

#[test]
fn help_exits_0() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("compress"));
}
