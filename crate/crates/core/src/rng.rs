//! Pinned pseudo-random streams.
//!
//! Weight init and temperature sampling both draw from SplitMix64 so that
//! any implementation following the same recipe reproduces the same model
//! and the same samples from a seed:
//!
//! * uniform in `(0, 1]`: `((x >> 11) + 1) · 2⁻⁵³`
//! * uniform in `[0, 1)`: `(x >> 11) · 2⁻⁵³`
//! * normal: Box–Muller on two `(0, 1]` uniforms `u1, u2`, emitting
//!   `√(−2 ln u1)·cos(2π u2)` first and `√(−2 ln u1)·sin(2π u2)` on the next
//!   call. All of it in `f64`.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform in `(0, 1]`; never zero, so safe under `ln`.
    pub fn next_f64_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }
}

/// Standard normals via Box–Muller, caching the second output of each pair.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream {
            rng: SplitMix64::new(seed),
            spare: None,
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.rng.next_f64_open0();
        let u2 = self.rng.next_f64_open0();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
