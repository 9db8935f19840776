use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::{Command, Stdio};
use std::time::Duration;

use offload_core::client::{ClientConfig, LocalMatrix, Session};

fn offload() -> Command {
    Command::new(env!("CARGO_BIN_EXE_offload"))
}

#[test]
fn datagen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = offload()
            .args([
                "datagen", "--kind", "lowrank", "--rows", "60", "--cols", "12", "--rank", "4", "--seed", "5",
            ])
            .arg("--out")
            .arg(&path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read(&path).unwrap(),
            std::fs::read_to_string(path.with_extension("bin.spectrum")).unwrap(),
        )
    };
    let (a, sa) = run("a.bin");
    let (b, sb) = run("b.bin");
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(sa.lines().count(), 4);
    assert_eq!(&a[..4], b"ALCH");
}

#[test]
fn zero_workers_is_a_usage_error() {
    let out = offload().args(["serve", "--workers", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn busy_port_fails_fast() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = offload()
        .args(["serve", "--workers", "1", "--port", &port])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn served_instance_accepts_sessions_and_stops_on_interrupt() {
    let mut child = offload()
        .args(["serve", "--workers", "2", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on ").unwrap().to_string();
    assert!(lines.next().unwrap().unwrap().starts_with("worker 0 at "));

    let s = Session::connect(ClientConfig::new(addr, 2).timeout(Duration::from_secs(30))).unwrap();
    let data: Vec<f64> = (0..40).map(|i| (i * 7 % 11) as f64).collect();
    let a = s
        .send_matrix(&LocalMatrix::from_row_major(10, 4, data.clone()).unwrap())
        .unwrap();
    assert_eq!(s.fetch_row_major(&a).unwrap(), data);
    s.close().unwrap();

    let status = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(child.wait().unwrap().success());
}

#[test]
fn transfer_bench_prints_a_table() {
    let out = offload()
        .args([
            "bench-transfer",
            "--rows",
            "300",
            "--cols",
            "8",
            "--client-procs",
            "1,2",
            "--workers",
            "1,2",
            "--reps",
            "1",
        ])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.lines().count() >= 4, "{text}");
}
