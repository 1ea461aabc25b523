//! IEEE 754 binary16 conversion with round-to-nearest-even.

use super::FederationError;

pub const F16_MAX: f32 = 65504.0;

/// Narrow one value. Magnitudes above 65504 and non-finite values are errors
/// rather than saturating to infinity.
pub fn f32_to_f16(x: f32) -> Result<u16, FederationError> {
    if !x.is_finite() || x.abs() > F16_MAX {
        return Err(FederationError::Fp16Range { index: 0, value: x });
    }
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;
    // Rebias from 127 to 15.
    let e = exp - 112;
    if e <= 0 {
        // Subnormal or zero in binary16. Below 2^-25 everything rounds to zero.
        if e < -10 {
            return Ok(sign);
        }
        let sig = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let mut half = sig >> shift;
        let rem = sig & ((1 << shift) - 1);
        let halfway = 1 << (shift - 1);
        if rem > halfway || (rem == halfway && half & 1 == 1) {
            half += 1;
        }
        return Ok(sign | half as u16);
    }
    let mut half = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && half & 1 == 1) {
        // A carry out of the mantissa correctly bumps the exponent.
        half += 1;
    }
    Ok(sign | half as u16)
}

/// Exact widening.
pub fn f16_to_f32(h: u16) -> f32 {
    let sign = u32::from(h & 0x8000) << 16;
    let exp = u32::from((h >> 10) & 0x1f);
    let man = u32::from(h & 0x03ff);
    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // Subnormal: value = man * 2^-24, exact in f32.
            let v = man as f32 * f32::from_bits(0x3380_0000);
            return if sign != 0 { -v } else { v };
        }
        (0x1f, 0) => sign | 0x7f80_0000,
        (0x1f, _) => sign | 0x7fc0_0000 | (man << 13),
        _ => sign | ((exp + 112) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}

/// Little-endian binary16 stream.
pub fn encode_fp16(values: &[f32]) -> Result<Vec<u8>, FederationError> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for (index, &v) in values.iter().enumerate() {
        let h = f32_to_f16(v).map_err(|_| FederationError::Fp16Range { index, value: v })?;
        out.extend_from_slice(&h.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_fp16(bytes: &[u8]) -> Result<Vec<f32>, FederationError> {
    if !bytes.len().is_multiple_of(2) {
        return Err(FederationError::Protocol { field: "payload", detail: format!("odd fp16 byte count {}", bytes.len()) });
    }
    Ok(bytes.chunks_exact(2).map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]]))).collect())
}

/// Round-trip through binary16.
pub fn quantize_fp16(values: &[f32]) -> Result<Vec<f32>, FederationError> {
    decode_fp16(&encode_fp16(values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn canonical_patterns() {
        assert_eq!(f32_to_f16(1.0).unwrap(), 0x3C00);
        assert_eq!(f16_to_f32(0x3C00), 1.0);
        assert_eq!(f32_to_f16(0.0).unwrap(), 0x0000);
        assert_eq!(f32_to_f16(-0.0).unwrap(), 0x8000);
        assert!(f16_to_f32(0x8000).is_sign_negative());
        assert_eq!(f32_to_f16(65504.0).unwrap(), 0x7BFF);
        assert_eq!(f32_to_f16(-2.0).unwrap(), 0xC000);
        assert_eq!(f32_to_f16(f32::from_bits(0x3380_0000)).unwrap(), 0x0001); // 2^-24
        assert_eq!(f32_to_f16(6.103_515_6e-5).unwrap(), 0x0400); // smallest normal
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(f32_to_f16(65505.0).is_err());
        assert!(f32_to_f16(-70000.0).is_err());
        assert!(f32_to_f16(f32::NAN).is_err());
        assert!(f32_to_f16(f32::INFINITY).is_err());
        match encode_fp16(&[1.0, 1e6]) {
            Err(FederationError::Fp16Range { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-11 sits halfway between 1.0 and the next half; even wins.
        assert_eq!(f32_to_f16(1.0 + f32::powi(2.0, -11)).unwrap(), 0x3C00);
        // 1 + 3·2^-11 is halfway between odd 0x3C01 and even 0x3C02.
        assert_eq!(f32_to_f16(1.0 + 3.0 * f32::powi(2.0, -11)).unwrap(), 0x3C02);
        // Halfway below the smallest subnormal rounds to zero.
        assert_eq!(f32_to_f16(f32::powi(2.0, -25)).unwrap(), 0x0000);
        assert_eq!(f32_to_f16(f32::powi(2.0, -25) * 1.5).unwrap(), 0x0001);
    }

    #[test]
    fn every_finite_half_round_trips() {
        for h in 0..=u16::MAX {
            if (h >> 10) & 0x1f == 0x1f {
                continue;
            }
            assert_eq!(f32_to_f16(f16_to_f32(h)).unwrap(), h, "{h:#06x}");
        }
    }

    #[test]
    fn nearest_representable_oracle() {
        // The chosen half must be at least as close as both neighbours.
        let mut rng = SplitMix64::new(99);
        for _ in 0..20_000 {
            let x = rng.uniform(-70.0, 70.0) as f32 * if rng.bernoulli(0.2) { 1e-5 } else { 1.0 };
            let h = f32_to_f16(x).unwrap();
            let err = (f16_to_f32(h) as f64 - x as f64).abs();
            for n in [h.wrapping_sub(1), h.wrapping_add(1)] {
                if (n >> 10) & 0x1f == 0x1f || (n & 0x7fff) == 0x7fff {
                    continue;
                }
                let alt = f16_to_f32(n);
                if alt.signum() == f16_to_f32(h).signum() {
                    assert!(err <= (alt as f64 - x as f64).abs(), "{x}: {h:#06x} vs {n:#06x}");
                }
            }
        }
    }
}
