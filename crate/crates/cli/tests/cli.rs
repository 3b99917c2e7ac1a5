use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "hidden_width=12",
    "--set",
    "batch_size=150",
    "--set",
    "pretrain_iters=6",
    "--set",
    "curriculum_iters=6",
    "--set",
    "log_interval=3",
];

fn reachnet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reachnet"))
        .args(args)
        .env("REACHNET_OUT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = reachnet(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train_tiny(root: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--quiet"];
    args.extend(TINY);
    args.extend(extra);
    ok(root, &args).trim().to_string()
}

/// All fields except the trailing runtime.
fn without_runtime(row: &str) -> &str {
    &row[..row.rfind(',').unwrap()]
}

#[test]
fn train_writes_a_run_directory_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ckpt = train_tiny(root, &["--set", "schedule=srl", "--set", "seed=4"]);
    let run = root.join("air3d_srl_4");
    assert_eq!(Path::new(&ckpt), run.join("air3d_srl_4.ckpt"));
    for f in ["config.cfg", "loss.csv", "pretrain.ckpt", "air3d_srl_4.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("iter,gamma,total,residual,terminal\n"));
    let ckpt_bytes = fs::read(&ckpt).unwrap();
    let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
    train_tiny(root, &["--set", "schedule=srl", "--set", "seed=4"]);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before, "finished run is reused");
    train_tiny(root, &["--set", "schedule=srl", "--set", "seed=4", "--force"]);
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_bytes);
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), loss);
}

#[test]
fn config_file_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(
        root.join("six.cfg"),
        "# two vehicles\nsystem = vehicles6d\nschedule = rrl\nseed = 2\n",
    )
    .unwrap();
    let ckpt = train_tiny(root, &["--config", "six.cfg", "--set", "seed=3"]);
    assert!(ckpt.ends_with("vehicles6d_rrl_3.ckpt"), "{ckpt}");
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = reachnet(root, &["train", "--set", "foo=1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown key") && err.contains("hidden_width"), "{err}");

    let out = reachnet(root, &["train", "--set", "schedule=sxl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule"));

    let out = reachnet(root, &["verify", "--model", "missing.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn oracle_verify_slice_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let grid = ok(root, &["oracle", "--nodes", "15", "--spacing", "0.1"]).trim().to_string();
    assert_eq!(Path::new(&grid), root.join("air3d_15.grid"));

    let verify = |model: &str| ok(root, &["verify", "--model", model, "--n", "200", "--seed", "3"]);
    let first = verify(&grid);
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "structure,seed,n,violation_rate,cond1,cond2,delta,runtime_s");
    assert!(lines[1].starts_with("grid,3,200,"));
    let again = verify(&grid);
    assert_eq!(without_runtime(lines[1]), without_runtime(again.lines().nth(1).unwrap()));

    let ckpt = train_tiny(root, &["--set", "schedule=ssl"]);
    verify(&ckpt);
    ok(root, &["verify", "--model", &ckpt, "--n", "50", "--out", "rep/report.csv"]);
    assert_eq!(fs::read_to_string(root.join("rep/report.csv")).unwrap().lines().count(), 2);

    let out = ok(
        root,
        &[
            "slice", "--model", &grid, "--model", &ckpt, "--tau", "0.9", "--fix", "theta=1.5708",
            "--free", "x1,x2", "--resolution", "9",
        ],
    );
    assert_eq!(out.lines().count(), 2);
    let csv = fs::read_to_string(root.join("slices/air3d_15.slice.csv")).unwrap();
    assert!(csv.starts_with("# system air3d\n# tau 0.9\n"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 81);

    for _ in 0..2 {
        ok(root, &["compare", "--a", &ckpt, "--b", &grid, "--tau", "0.5", "--resolution", "11"]);
    }
    let cmp = fs::read_to_string(root.join("comparisons.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 3);
    assert!(cmp.starts_with("a,b,tau,mse,sub_zero_iou"));
    // identical inputs give an identical row
    let rows: Vec<&str> = cmp.lines().skip(1).collect();
    assert_eq!(rows[0], rows[1]);

    let out = reachnet(root, &["slice", "--model", &grid, "--fix", "theta=9", "--free", "x1,theta"]);
    assert!(!out.status.success());
}

#[test]
fn pairwise_union_slice_of_a_two_vehicle_model() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let six = train_tiny(root, &["--set", "system=vehicles6d", "--set", "schedule=sl"]);
    let out = ok(
        root,
        &["slice", "--model", &six, "--pairwise-union", "--free", "x1,x2", "--resolution", "7", "--fix", "x5=0.5"],
    );
    assert!(out.trim().ends_with("vehicles6d_sl_0.union.slice.csv"));
    let csv = fs::read_to_string(out.trim()).unwrap();
    assert!(csv.starts_with("# system vehicles9d\n"));
    let air = train_tiny(root, &["--set", "schedule=sl"]);
    assert!(!reachnet(root, &["slice", "--model", &air, "--pairwise-union"]).status.success());
}

#[test]
fn sweep_merges_rows_and_isolates_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["oracle", "--nodes", "15", "--spacing", "0.1"]);
    let mut args = vec!["sweep", "--quiet", "--schedules", "ssl,rrl,qq", "--seeds", "0,1", "--n", "100"];
    args.extend(TINY);
    args.extend(["--oracle", "air3d_15.grid", "--tau", "0.9", "--resolution", "11", "--parallel", "2"]);
    let out = reachnet(root, &args);
    assert!(!out.status.success(), "the bad schedule is reported");
    let results = fs::read_to_string(root.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "schedule,structure,seed,n,violation_rate,cond1,cond2,delta,runtime_s,slice_mse,status");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("ssl,air3d_ssl_0,1,100,"));
    assert!(lines[4].starts_with("rrl,air3d_rrl_1,"));
    for row in &lines[1..5] {
        assert!(row.ends_with(",ok"), "{row}");
        assert_eq!(row.split(',').count(), 11);
    }
    assert!(lines[5].contains("failed"));
    assert_eq!(lines[5].split(',').count(), 11);

    // A rerun reuses the finished runs and reproduces every outcome.
    let mut args2 = args.clone();
    args2[3] = "ssl,rrl";
    let ckpt = root.join("air3d_ssl_0/air3d_ssl_0.ckpt");
    let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
    ok(root, &args2);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
    let rerun = fs::read_to_string(root.join("results.csv")).unwrap();
    let strip = |row: &str| {
        let f: Vec<&str> = row.split(',').collect();
        [&f[..8], &f[9..]].concat().join(",")
    };
    for (a, b) in lines[1..5].iter().zip(rerun.lines().skip(1)) {
        assert_eq!(strip(a), strip(b));
    }
}
