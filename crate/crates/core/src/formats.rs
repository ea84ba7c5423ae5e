//! Software emulation of the E2M1 (FP4) and E4M3 (FP8) grids.
//!
//! Both projections round to nearest with ties going to the code whose
//! lowest mantissa bit is zero. E4M3 follows the OCP FP8 convention. It has
//! no infinities and one NaN pattern per sign (`S.1111.111`), which leaves
//! 448 as the largest finite magnitude.

use std::fmt;

use crate::error::{Error, Result};

/// Largest finite FP4 magnitude.
pub const Q_MAX: f32 = 6.0;
/// Largest finite E4M3 magnitude.
pub const S_MAX: f32 = 448.0;

/// Non-negative E2M1 magnitudes indexed by the low three code bits.
const E2M1_MAGNITUDES: [f32; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// A 4-bit E2M1 code: `s ee m`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fp4Code(u8);

impl Fp4Code {
    pub const POS_ZERO: Fp4Code = Fp4Code(0);

    /// Builds a code from its low four bits; higher bits are discarded.
    pub const fn from_bits(bits: u8) -> Self {
        Fp4Code(bits & 0x0f)
    }

    pub const fn from_fields(sign: u8, exponent: u8, mantissa: u8) -> Self {
        Fp4Code(((sign & 1) << 3) | ((exponent & 3) << 1) | (mantissa & 1))
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn is_negative(self) -> bool {
        self.0 & 0x08 != 0
    }

    pub const fn magnitude_index(self) -> usize {
        (self.0 & 0x07) as usize
    }

    pub fn decode(self) -> f32 {
        e2m1_decode(self)
    }

    /// All sixteen codes in ascending bit order.
    pub fn all() -> impl Iterator<Item = Fp4Code> {
        (0u8..16).map(Fp4Code)
    }
}

impl fmt::Debug for Fp4Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp4Code({:#x} = {})", self.0, self.decode())
    }
}

/// An 8-bit E4M3 code: `s eeee mmm`, exponent bias 7.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fp8E4M3Code(u8);

impl Fp8E4M3Code {
    pub const POS_ZERO: Fp8E4M3Code = Fp8E4M3Code(0);
    pub const MAX: Fp8E4M3Code = Fp8E4M3Code(0x7e);
    pub const NAN: Fp8E4M3Code = Fp8E4M3Code(0x7f);

    pub const fn from_bits(bits: u8) -> Self {
        Fp8E4M3Code(bits)
    }

    pub const fn from_fields(sign: u8, exponent: u8, mantissa: u8) -> Self {
        Fp8E4M3Code(((sign & 1) << 7) | ((exponent & 0x0f) << 3) | (mantissa & 0x07))
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn is_nan(self) -> bool {
        self.0 & 0x7f == 0x7f
    }

    pub fn decode(self) -> Result<f32> {
        e4m3_decode(self)
    }

    pub fn all() -> impl Iterator<Item = Fp8E4M3Code> {
        (0u8..=255).map(Fp8E4M3Code)
    }
}

impl fmt::Debug for Fp8E4M3Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.decode() {
            Ok(v) => write!(f, "Fp8E4M3Code({:#04x} = {})", self.0, v),
            Err(_) => write!(f, "Fp8E4M3Code({:#04x} = NaN)", self.0),
        }
    }
}

pub fn e2m1_decode(code: Fp4Code) -> f32 {
    let magnitude = E2M1_MAGNITUDES[code.magnitude_index()];
    if code.is_negative() {
        -magnitude
    } else {
        magnitude
    }
}

/// Projects a finite value onto the nearest E2M1 code, clamping to ±6.
pub fn pi_fp4(x: f32) -> Result<Fp4Code> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("cannot project {x} onto FP4")));
    }
    let a = x.abs();
    // Midpoints between neighbours; equality goes to the even code.
    let index = if a <= 0.25 {
        0
    } else if a < 0.75 {
        1
    } else if a <= 1.25 {
        2
    } else if a < 1.75 {
        3
    } else if a <= 2.5 {
        4
    } else if a < 3.5 {
        5
    } else if a <= 5.0 {
        6
    } else {
        7
    };
    let sign = if x.is_sign_negative() { 0x08 } else { 0 };
    Ok(Fp4Code(sign | index))
}

pub fn e4m3_decode(code: Fp8E4M3Code) -> Result<f32> {
    if code.is_nan() {
        return Err(Error::invalid(format!("E4M3 code {:#04x} is NaN", code.0)));
    }
    let exponent = i32::from((code.0 >> 3) & 0x0f);
    let mantissa = f32::from(code.0 & 0x07);
    let magnitude = if exponent == 0 {
        mantissa * (-9f32).exp2()
    } else {
        (1.0 + mantissa / 8.0) * ((exponent - 7) as f32).exp2()
    };
    Ok(if code.0 & 0x80 != 0 { -magnitude } else { magnitude })
}

/// Round-to-nearest-even onto the E4M3 grid, saturating at ±448.
pub fn pi_e4m3(x: f32) -> Result<Fp8E4M3Code> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("cannot project {x} onto E4M3")));
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let magnitude = x.abs();
    if magnitude >= S_MAX {
        return Ok(Fp8E4M3Code(sign | Fp8E4M3Code::MAX.0));
    }
    // All arithmetic below is exact in f64: the input has 24 significant
    // bits and only power-of-two rescaling happens before rounding.
    let a = f64::from(magnitude);
    let bits = if a < (-6f64).exp2() {
        // m = 8 carries into exponent field 1, mantissa 0, which is correct.
        (a * 512.0).round_ties_even() as u8
    } else {
        // Normal f32 here, so the biased exponent field is exact.
        let mut exponent = ((magnitude.to_bits() >> 23) & 0xff) as i32 - 127;
        let fraction = a / f64::from(exponent).exp2() - 1.0;
        let mut mantissa = (fraction * 8.0).round_ties_even() as i32;
        if mantissa == 8 {
            mantissa = 0;
            exponent += 1;
        }
        let field = exponent + 7;
        debug_assert!((1..=15).contains(&field));
        debug_assert!(!(field == 15 && mantissa == 7));
        ((field as u8) << 3) | mantissa as u8
    };
    Ok(Fp8E4M3Code(sign | bits))
}

/// `code,value` table of every FP4 and FP8 code, in ascending bit order.
pub fn format_table() -> String {
    let mut out = String::from("# e2m1\n");
    for code in Fp4Code::all() {
        out.push_str(&format!("{:#04x},{}\n", code.bits(), code.decode()));
    }
    out.push_str("# e4m3\n");
    for code in Fp8E4M3Code::all() {
        match code.decode() {
            Ok(v) => out.push_str(&format!("{:#04x},{}\n", code.bits(), v)),
            Err(_) => out.push_str(&format!("{:#04x},NaN\n", code.bits())),
        }
    }
    out
}
