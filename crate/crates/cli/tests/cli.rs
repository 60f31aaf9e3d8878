use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.ok(&["init", "--seed", "42", "--out", ws.p("m.qspc").to_str().unwrap()]);
        ws
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.p(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_qspec"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn qspec_and_w4a16_write_identical_tokens() {
    let ws = Workspace::new();
    ws.write("p.txt", "3 14 15 92 65\n");
    for gamma in ["1", "3", "7"] {
        ws.ok(&[
            "generate",
            "--model",
            "m.qspc",
            "--prompt",
            "p.txt",
            "--mode",
            "qspec",
            "--gamma",
            gamma,
            "--max-new",
            "24",
            "--out",
            "q.txt",
        ]);
        ws.ok(&[
            "generate",
            "--model",
            "m.qspc",
            "--prompt",
            "p.txt",
            "--mode",
            "w4a16",
            "--max-new",
            "24",
            "--out",
            "g.txt",
        ]);
        assert_eq!(read(&ws.p("q.txt")), read(&ws.p("g.txt")));
        assert_eq!(read(&ws.p("q.txt")).split_whitespace().count(), 24);
    }
}

#[test]
fn gamma_outside_qspec_warns() {
    let ws = Workspace::new();
    ws.write("p.txt", "1 2 3");
    let out = ws.run(&[
        "generate", "--model", "m.qspc", "--prompt", "p.txt", "--mode", "w4a4", "--gamma", "5",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn bench_at_batch_one_matches_generate() {
    let ws = Workspace::new();
    ws.write("w.txt", "r0 12 5 6 7\nr1 9 200 1\n");
    let stats = ws.ok(&[
        "bench",
        "--model",
        "m.qspc",
        "--workload",
        "w.txt",
        "--batch",
        "1",
        "--trace",
        "bt.jsonl",
    ]);
    let bench_trace = read(&ws.p("bt.jsonl"));
    for (id, prompt, n) in [("r0", "5 6 7", "12"), ("r1", "200 1", "9")] {
        ws.write("p.txt", prompt);
        let tokens = ws.ok(&[
            "generate",
            "--model",
            "m.qspc",
            "--prompt",
            "p.txt",
            "--max-new",
            n,
            "--trace",
            "t.jsonl",
        ]);
        assert!(stats.contains(&format!("request.{id}.tokens: {tokens}")), "{stats}");
        let cycles = read(&ws.p("t.jsonl")).lines().count();
        assert!(stats.contains(&format!("request.{id}.cycles: {cycles}\n")));
        let tagged = bench_trace
            .lines()
            .filter(|l| l.contains(&format!("\"request\":\"{id}\"")))
            .count();
        assert_eq!(tagged, cycles);
    }
}

#[test]
fn probe_emits_one_row_per_golden_token() {
    let ws = Workspace::new();
    ws.write("p.txt", "8 9 10");
    ws.write("gold.txt", "1 2 3 4 5 6 7");
    let out = ws.ok(&[
        "probe", "--model", "m.qspc", "--prompt", "p.txt", "--golden", "gold.txt",
    ]);
    assert_eq!(out.lines().count(), 7);
    let out = ws.ok(&["probe", "--model", "m.qspc", "--prompt", "p.txt", "--max-new", "5"]);
    assert_eq!(out.lines().count(), 5);
}

#[test]
fn cost_sim_and_sweep_produce_tables() {
    let ws = Workspace::new();
    ws.write("p.txt", "4 4 4");
    ws.ok(&[
        "generate", "--model", "m.qspc", "--prompt", "p.txt", "--trace", "t.jsonl",
    ]);
    ws.write("prof.txt", "low 1 1 0.3\nhigh 1 1 1.0\nhigh 1 8 1.5\n");
    let report = ws.ok(&["cost-sim", "--trace", "t.jsonl", "--profile", "prof.txt"]);
    assert!(report.contains("speedup_vs_base: "));
    ws.write("ps.txt", "1 2 3\n4 5\n");
    let table = ws.ok(&[
        "sweep",
        "--model",
        "m.qspc",
        "--prompts",
        "ps.txt",
        "--gamma-min",
        "2",
        "--gamma-max",
        "4",
        "--max-new",
        "8",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("gamma,acceptance_rate"));
}

#[test]
fn quantize_converts_float_checkpoints() {
    let ws = Workspace::new();
    ws.ok(&["init", "--seed", "42", "--float", "--out", "f.qspc"]);
    ws.ok(&["quantize", "--input", "f.qspc", "--out", "q.qspc"]);
    assert_eq!(fs::read(ws.p("q.qspc")).unwrap(), fs::read(ws.p("m.qspc")).unwrap());
}

#[test]
fn outputs_are_deterministic() {
    let ws = Workspace::new();
    ws.write("p.txt", "10 20 30");
    let a = ws.ok(&["generate", "--model", "m.qspc", "--prompt", "p.txt"]);
    let b = ws.ok(&["generate", "--model", "m.qspc", "--prompt", "p.txt"]);
    assert_eq!(a, b);
}

#[test]
fn failures_exit_with_their_category() {
    let ws = Workspace::new();
    ws.write("p.txt", "1 2 3");
    ws.write("bad.txt", "1 two");
    ws.write("oov.txt", "1 99999");
    ws.write("garbage.qspc", "not a checkpoint");
    let code = |args: &[&str]| ws.run(args).status.code().unwrap();
    assert_eq!(code(&["generate", "--model", "missing.qspc", "--prompt", "p.txt"]), 9);
    assert_eq!(code(&["generate", "--model", "garbage.qspc", "--prompt", "p.txt"]), 8);
    assert_eq!(code(&["generate", "--model", "m.qspc", "--prompt", "bad.txt"]), 8);
    assert_eq!(code(&["generate", "--model", "m.qspc", "--prompt", "oov.txt"]), 6);
    assert_eq!(
        code(&["generate", "--model", "m.qspc", "--prompt", "p.txt", "--gamma", "9"]),
        4
    );
    assert_eq!(
        code(&[
            "generate",
            "--model",
            "m.qspc",
            "--prompt",
            "p.txt",
            "--max-new",
            "1000"
        ]),
        5
    );
    assert_eq!(code(&["generate", "--model", "m.qspc"]), 2);
    let out = ws.run(&["generate", "--model", "garbage.qspc", "--prompt", "p.txt"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}
