use std::path::Path;
use std::process::{Command, Output};

use ade_core::hetgraph::build_relation_graphs;
use ade_sim::graph_io::load_hetgraph;

fn ade_sim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ade-sim"))
        .args(args)
        .current_dir(cwd)
        .env("ADE_SIM_LOG", "error")
        .output()
        .expect("spawn ade-sim")
}

fn gen(dir: &Path, name: &str, counts: &str, exponent: &str, seed: &str) {
    let out = ade_sim(
        &["gen", "--counts", counts, "--dim", "8", "--exponent", exponent, "--seed", seed, "--out", name],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "a.json", "50,80", "2.2", "11");
    gen(dir.path(), "b.json", "50,80", "2.2", "11");
    for (x, y) in [("a.v0.f32", "b.v0.f32"), ("a.v1.f32", "b.v1.f32"), ("a.e0.u32", "b.e0.u32")] {
        assert_eq!(
            std::fs::read(dir.path().join(x)).unwrap(),
            std::fs::read(dir.path().join(y)).unwrap()
        );
    }
    assert_eq!(
        load_hetgraph(&dir.path().join("a.json")).unwrap(),
        load_hetgraph(&dir.path().join("b.json")).unwrap()
    );
}

#[test]
fn generated_degrees_are_heavy_tailed() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "g.json", "1000", "2.2", "42");
    let g = load_hetgraph(&dir.path().join("g.json")).unwrap();
    let max = build_relation_graphs(&g).iter().map(|s| s.max_degree()).max().unwrap();
    assert!(max > 50, "max in-degree {max}");
}

#[test]
fn run_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "g.json", "60,90", "2.2", "4");
    let out = ade_sim(&["run", "--graph", "g.json", "--k", "2", "--seed", "1", "--out", "r", "--dump-trace"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fused-k2"), "{stdout}");
    for f in ["report.json", "report.csv", "fused-k2.trace.ndjson", "staged-unbounded.trace.ndjson"] {
        assert!(dir.path().join("r").join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["fidelity_label"], "fidelity-proxy");
    assert_eq!(report["runs"][1]["k"], 2);

    let out = ade_sim(&["inspect", "--trace", "r/fused-k2.trace.ndjson", "--simulate"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("total_cycles"));

    let out = ade_sim(&["sweep", "--graph", "g.json", "--k", "1,3,unbounded", "--jobs", "2", "--out", "s"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn inspect_prints_degree_statistics() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "g.json", "30,40", "2.2", "2");
    let out = ade_sim(&["inspect", "--graph", "g.json"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("vertices: 70"), "{text}");
    assert!(text.contains("semantic graphs: 2"), "{text}");
}

#[test]
fn missing_graph_exits_with_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = ade_sim(&["run", "--graph", "nowhere/graph.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/graph.json"));
}

#[test]
fn zero_k_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "g.json", "20,20", "2.2", "1");
    let out = ade_sim(&["run", "--graph", "g.json", "--k", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), "{ not json").unwrap();
    let out = ade_sim(&["run", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.json"));
}
