//! Seeded random fields.
//!
//! Every random quantity in the toolkit flows from a single 64-bit seed
//! through this splitmix-style generator, so runs are reproducible
//! bit-for-bit across platforms.

use crate::grid::{GridSpec, ScalarField, VectorField};

/// SplitMix64 (Steele, Lea, Flood 2014). State advances by the golden
/// ratio increment; output is finalized with two xor-shift-multiply rounds.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0,1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Cell-centered field with i.i.d. uniform entries in [lo, hi].
    pub fn scalar_field(&mut self, grid: &GridSpec, lo: f64, hi: f64) -> ScalarField {
        let mut s = ScalarField::zeros(grid);
        for v in s.as_mut_slice() {
            *v = self.uniform(lo, hi);
        }
        s
    }

    /// Face field with i.i.d. uniform entries and zeroed wall normals,
    /// i.e. an admissible (no-slip compatible) random vector field.
    pub fn admissible_vector_field(&mut self, grid: &GridSpec, lo: f64, hi: f64) -> VectorField {
        let mut v = VectorField::zeros(grid);
        for e in v.x_mut_slice() {
            *e = self.uniform(lo, hi);
        }
        for e in v.y_mut_slice() {
            *e = self.uniform(lo, hi);
        }
        v.zero_boundary_normals();
        v
    }
}
