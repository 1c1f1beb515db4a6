use std::path::PathBuf;

use insgen::datasets::{load_table, save_table};
use sha2::{Digest, Sha256};

// Oracle values computed outside this crate when the fixture was generated.
// Every cell is a multiple of 1/256, so the sums below are exact in f64.
const FIXTURE_SHA256: &str = "6a5740e2657a628f59f2f62fe5a7776ff6a9e9ab65f953082938e9e33c4056b3";
const COLUMN_SUMS: [f64; 3] = [371.296875, -792.13671875, -852.42578125];
const SUM_OF_SQUARES: f64 = 2561740.1654663086;
const ROW_4321: [f64; 3] = [-5.0390625, -6.8359375, -5.89453125];

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/table_10k.csv")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn fixture_file_is_intact() {
    let bytes = std::fs::read(fixture()).unwrap();
    assert_eq!(sha256_hex(&bytes), FIXTURE_SHA256);
}

#[test]
fn ten_thousand_rows_load_and_match_checksums() {
    let ds = load_table(&fixture()).unwrap();
    assert_eq!((ds.len(), ds.dim()), (10_000, 3));
    let mut sums = [0.0; 3];
    let mut sq = 0.0;
    for row in ds.samples.row_iter() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
            sq += v * v;
        }
    }
    assert_eq!(sums, COLUMN_SUMS);
    assert_eq!(sq, SUM_OF_SQUARES);
    assert_eq!(ds.samples.row(4321), &ROW_4321);
}

#[test]
fn saving_the_loaded_table_reproduces_the_file() {
    let ds = load_table(&fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.csv");
    save_table(&ds.samples, &out).unwrap();
    assert_eq!(sha256_hex(&std::fs::read(&out).unwrap()), FIXTURE_SHA256);
}
