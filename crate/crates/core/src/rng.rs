//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(key, stream, step, draw)`, so any path
//! can be regenerated in isolation and parallel schedules never change the
//! numbers a path sees. The block function is Philox4x32-10.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Key of a family of independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    key: [u32; 2],
}

impl StreamKey {
    pub fn from_seed(seed: u64) -> Self {
        let z = splitmix64(seed);
        StreamKey {
            key: [z as u32, (z >> 32) as u32],
        }
    }

    /// Named sub-stream of a top-level seed, e.g. `"drift-solve"`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::from_seed(splitmix64(seed) ^ fnv1a(name))
    }

    /// Derived key, used for fresh-seed re-evaluations.
    pub fn child(&self, tag: u64) -> Self {
        let base = (self.key[0] as u64) | ((self.key[1] as u64) << 32);
        Self::from_seed(splitmix64(base ^ splitmix64(tag)))
    }

    #[inline]
    pub fn block(&self, stream: u64, step: u64, draw: u32) -> [u32; 4] {
        debug_assert!(step <= u32::MAX as u64);
        philox4x32_10(
            [draw, step as u32, stream as u32, (stream >> 32) as u32],
            self.key,
        )
    }

    /// Two uniforms in the open interval (0, 1).
    #[inline]
    pub fn uniform_pair(&self, stream: u64, step: u64, draw: u32) -> (f64, f64) {
        let b = self.block(stream, step, draw);
        (to_open_unit(b[0], b[1]), to_open_unit(b[2], b[3]))
    }

    /// Fills `out` with standard normals for `(stream, step)`.
    #[inline]
    pub fn normals(&self, stream: u64, step: u64, out: &mut [f64]) {
        let mut i = 0;
        let mut draw = 0u32;
        while i < out.len() {
            let (u1, u2) = self.uniform_pair(stream, step, draw);
            let (z1, z2) = box_muller(u1, u2);
            out[i] = z1;
            if i + 1 < out.len() {
                out[i + 1] = z2;
            }
            i += 2;
            draw += 1;
        }
    }

    /// Fills `out` with uniforms in (0, 1) for `(stream, step)`.
    pub fn uniforms(&self, stream: u64, step: u64, out: &mut [f64]) {
        let mut i = 0;
        let mut draw = 0u32;
        while i < out.len() {
            let (u1, u2) = self.uniform_pair(stream, step, draw);
            out[i] = u1;
            if i + 1 < out.len() {
                out[i + 1] = u2;
            }
            i += 2;
            draw += 1;
        }
    }
}

#[inline]
fn to_open_unit(hi: u32, lo: u32) -> f64 {
    let bits = (((hi as u64) << 32) | lo as u64) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with Random123.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn streams_are_regenerable_and_distinct() {
        let k = StreamKey::from_seed(42);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        k.normals(7, 11, &mut a);
        k.normals(7, 11, &mut b);
        assert_eq!(a, b);
        k.normals(8, 11, &mut b);
        assert_ne!(a, b);
        let named = StreamKey::named(42, "simulate");
        assert_ne!(named, StreamKey::named(42, "drift-solve"));
        assert_ne!(k.child(1), k.child(2));
    }

    #[test]
    fn normal_moments() {
        let k = StreamKey::from_seed(1);
        let n = 200_000u64;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        let mut z = [0.0; 2];
        for i in 0..n {
            k.normals(i, 0, &mut z);
            for v in z {
                s1 += v;
                s2 += v * v;
                s4 += v * v * v * v;
            }
        }
        let m = 2.0 * n as f64;
        assert!((s1 / m).abs() < 4.0 / m.sqrt());
        assert!((s2 / m - 1.0).abs() < 4.0 * 2f64.sqrt() / m.sqrt());
        assert!((s4 / m - 3.0).abs() < 0.05);
    }

    #[test]
    fn uniforms_in_open_interval() {
        let k = StreamKey::from_seed(3);
        let mut u = [0.0; 5];
        let mut sum = 0.0;
        for i in 0..10_000 {
            k.uniforms(i, 2, &mut u);
            for v in u {
                assert!(v > 0.0 && v < 1.0);
                sum += v;
            }
        }
        assert!((sum / 50_000.0 - 0.5).abs() < 0.01);
    }
}
