//! Shared fixture builders for integration tests.
//!
//! Fixtures are generated from a hand-rolled LCG rather than a rand
//! crate so the committed files stay reproducible across dependency
//! upgrades. `tests/fixtures.rs` asserts the shipped files match these
//! builders byte for byte.

#![allow(dead_code)]

use std::path::PathBuf;

use swa::tensor_io::{Dtype, TensorEntry, TensorStore};

/// Deterministic 64-bit LCG (Knuth multiplier).
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0
    }

    /// Uniform in [-1, 1), rounded through f32 so F32 storage is exact.
    pub fn uniform_f32(&mut self) -> f64 {
        let bits = self.next_u64() >> 11;
        let v = (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
        (v as f32) as f64
    }
}

pub fn f32_tensor(rng: &mut Lcg, rows: usize, cols: usize) -> TensorEntry {
    TensorEntry {
        dtype: Dtype::F32,
        shape: vec![rows, cols],
        values: (0..rows * cols).map(|_| rng.uniform_f32()).collect(),
    }
}

/// The shipped three-dense-layer model.
pub fn dense3_store() -> TensorStore {
    let mut rng = Lcg::new(0x5747_2026);
    let mut store = TensorStore::default();
    store
        .metadata
        .insert("fixture".to_string(), "dense3".to_string());
    for (name, rows) in [
        ("dense1.weight", 96),
        ("dense2.weight", 80),
        ("dense3.weight", 128),
    ] {
        store
            .tensors
            .insert(name.to_string(), f32_tensor(&mut rng, rows, 64));
    }
    store
}

/// Twenty-layer baseline and a variant with layers 03 and 11 scaled by
/// 0.01: the paired scale-collapse fixture.
pub fn collapse_pair_stores() -> (TensorStore, TensorStore) {
    let mut rng = Lcg::new(0xC011_A95E);
    let mut baseline = TensorStore::default();
    for i in 0..20 {
        baseline
            .tensors
            .insert(format!("layer{i:02}.weight"), f32_tensor(&mut rng, 64, 56));
    }
    let mut variant = baseline.clone();
    for name in ["layer03.weight", "layer11.weight"] {
        let entry = variant.tensors.get_mut(name).unwrap();
        for v in &mut entry.values {
            *v = ((*v * 0.01) as f32) as f64;
        }
    }
    (baseline, variant)
}

/// The shipped synthetic series CSV: every metric strictly increasing
/// while reported error strictly decreases, giving Kendall tau = -1
/// against the error target for all four headline metrics.
pub const SERIES_CSV: &str = "\
series,model_id,reported_top1,reported_top5,log_frobenius,log_spectral,weighted_alpha,log_alpha_norm,alpha_bar
synthvgg,sv11,68.5,88.6,2.31,0.52,1.95,2.05,2.9
synthvgg,sv13,69.9,89.3,2.45,0.64,2.22,2.33,3.0
synthvgg,sv16,71.6,90.4,2.59,0.78,2.49,2.61,3.1
synthvgg,sv19,72.4,90.9,2.76,0.93,2.77,2.9,3.2
synthvgg,sv19b,73.4,91.5,2.9,1.04,3.01,3.15,3.3
synthvgg,sv19c,74.2,92.0,3.05,1.18,3.28,3.43,3.4
";

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn fixture_path(name: &str) -> PathBuf {
    data_dir().join(name)
}

/// Path of the swa binary under test.
pub fn swa_bin() -> &'static str {
    env!("CARGO_BIN_EXE_swa")
}
