// shared by several test targets; each uses a subset
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn vpguide(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_vpguide"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn fails(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_vpguide"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `root`, by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// Runs the whole command set into `out/` inside `dir`.
pub fn run_all(dir: &Path) -> String {
    let scene = "out/scenes/scene_000";
    let frames = format!("{scene}/frame_000.pgm,{scene}/frame_001.pgm,{scene}/frame_002.pgm");
    let frame = format!("{scene}/frame_002.pgm");
    let label = format!("{scene}/label_002.pgm");
    vpguide(
        dir,
        &[
            "synth",
            "generate",
            "--scenes",
            "2",
            "--seed",
            "5",
            "--height",
            "256",
            "--width",
            "512",
            "--frames",
            "3",
            "-o",
            "out/scenes",
        ],
    );
    let stdout = vpguide(dir, &["vp", "detect", &frame, "--seed", "3", "--json", "out/vp.json"]).stdout;
    vpguide(
        dir,
        &[
            "vp",
            "proximity",
            &frame,
            "--vp",
            "256,90",
            "--variant",
            "power",
            "-o",
            "out/prox.ctnsr",
            "--pgm",
            "out/prox.pgm",
        ],
    );
    fs::write(dir.join("cfg.json"), r#"{"channels": 8, "motion_layers": 1}"#).unwrap();
    vpguide(
        dir,
        &[
            "pipeline", "run", "--frames", &frames, "--config", "cfg.json", "-o", "out/run",
        ],
    );
    vpguide(
        dir,
        &[
            "motion",
            "directions",
            "--features",
            "out/run/O.ctnsr",
            "--vp",
            "3,1.5",
            "--patch-size",
            "4",
            "-o",
            "out/dirs.csv",
        ],
    );
    vpguide(
        dir,
        &[
            "dense",
            "region",
            "--features",
            "out/run/O.ctnsr",
            "--vp",
            "3,1.5",
            "--patch-size",
            "4",
            "--json",
            "out/region.json",
        ],
    );
    vpguide(
        dir,
        &[
            "metrics",
            "eval",
            "--pred",
            "out/run/P_f.ctnsr",
            "--gt",
            &label,
            "--invalid-mask",
            &format!("{scene}/mask_002.pgm"),
            "--instances",
            &format!("{scene}/instance_002.pgm"),
            "--json",
            "out/metrics.json",
        ],
    );
    vpguide(
        dir,
        &[
            "pipeline",
            "train",
            "--synthetic",
            "--steps",
            "2",
            "--seed",
            "7",
            "--scenes",
            "1",
            "--config",
            "cfg.json",
            "-o",
            "out/params",
        ],
    );
    vpguide(
        dir,
        &[
            "pipeline",
            "run",
            "--frames",
            &frames,
            "--config",
            "out/params/config.json",
            "--params",
            "out/params",
            "-o",
            "out/trained",
        ],
    );
    String::from_utf8(stdout).unwrap()
}
