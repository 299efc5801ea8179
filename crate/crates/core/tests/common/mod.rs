#![allow(dead_code)]

use std::path::PathBuf;

use comppow::scenario::parse_scenario;
use comppow::Scenario;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn paper_dir() -> PathBuf {
    repo_root().join("scenarios/paper")
}

pub fn load(name: &str) -> Scenario {
    let p = paper_dir().join(format!("{name}.json"));
    parse_scenario(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Every shipped scenario, by file stem, in name order.
pub fn shipped() -> Vec<(String, Scenario)> {
    let mut names: Vec<String> = std::fs::read_dir(paper_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "json").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), load(&n))).collect()
}

pub const GEMMS: [&str; 4] = [
    "gemm_16384x106496x8192",
    "gemm_18432x16384x16384",
    "gemm_8192x57344x8192",
    "gemm_8192x8192x10240",
];

pub const CONCURRENT: [&str; 2] = [
    "concurrent_16384x106496x8192_ag4g",
    "concurrent_18432x16384x16384_ag1.5g",
];
