use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

fn mindsim(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mindsim"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    let mut input = child.stdin.take().unwrap();
    if let Some(text) = stdin {
        input.write_all(text.as_bytes()).unwrap();
    }
    drop(input);
    child.wait_with_output().unwrap()
}

const TRACE: &str = "\
# seq,blade,pdid,op,arg1[,arg2]
1,0,1,ALLOC,65536,buf
2,0,1,W,$buf+0
3,1,1,R,$buf+0x1000
4,1,1,W,$buf+0
5,0,1,R,$buf+0
6,0,1,FREE,$buf
";

#[test]
fn run_reads_stdin_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.csv");
    let summary = dir.path().join("s.json");
    let out = mindsim(
        &["run", "--trace", "-", "--metrics", metrics.to_str().unwrap(), "--summary", summary.to_str().unwrap()],
        Some(TRACE),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,end_us,live_entries,"));
    let json = fs::read_to_string(&summary).unwrap();
    assert!(json.contains("\"status\": \"clean\""), "{json}");
}

#[test]
fn empty_trace_exits_clean_with_header_only() {
    let out = mindsim(&["run", "--trace", "-"], Some(""));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.conf");
    fs::write(&cfg, "# tiny directory\ndir-capacity = 2\nepoch-ms = 0.01\n").unwrap();
    let args = ["run", "--config", cfg.to_str().unwrap(), "--trace", "-", "--initial-region", "4K"];
    let three_pages = format!("{TRACE}7,0,1,ALLOC,65536,c\n8,0,1,R,$c+0\n9,1,1,R,$c+0x1000\n10,2,1,R,$c+0x2000\n");
    let out = mindsim(&args, Some(&three_pages));
    // three live 4K regions cannot fit in two slots
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = mindsim(&["run", "--config", cfg.to_str().unwrap(), "--dir-capacity", "64", "--trace", "-"], Some(TRACE));
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn dotted_latency_flag_changes_latency() {
    let slow = mindsim(&["run", "--trace", "-", "--latency.one-way-hop", "4"], Some(TRACE));
    let fast = mindsim(&["run", "--trace", "-"], Some(TRACE));
    assert_eq!(slow.status.code(), Some(0));
    assert_ne!(slow.stdout, fast.stdout);
}

#[test]
fn errors_exit_one_with_named_key_or_line() {
    let bad_key = mindsim(&["run", "--trace", "-", "--page-size", "3000"], Some(""));
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("page-size"));

    let bad_line = mindsim(&["run", "--trace", "-"], Some("1,0,1,ALLOC,4096,a\n2,0,1,JUMP,0\n"));
    assert_eq!(bad_line.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_line.stderr).contains("line 2"));
}

#[test]
fn verify_trace_and_random_batch() {
    let out = mindsim(&["verify", "--trace", "-"], Some(TRACE));
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("diffs=0"));

    let out = mindsim(&["verify", "--random", "5", "--first-seed", "40"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("5 traces, 0 with differences"));
}

#[test]
fn sweeps_emit_csv() {
    let out = mindsim(
        &[
            "sweep-grid",
            "--read-ratios",
            "0,1",
            "--sharing-ratios",
            "1",
            "--ops-per-blade",
            "200",
            "--working-set",
            "64",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("read_ratio,sharing_ratio,blades,iops,"));
    assert_eq!(text.lines().count(), 3);

    let out = mindsim(&["sweep-split", "--trace", "-", "--initial-regions", "4K,64K", "--epochs-ms", "1"], Some(TRACE));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}
