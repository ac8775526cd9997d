//! Hash-based value noise.

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(seed ^ mix64(a)).wrapping_add(b))
}

/// Uniform in `[0, 1)` from a hash.
#[inline]
pub(crate) fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    unit(hash3(seed, ix as u64, iy as u64))
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1]`, unit lattice spacing.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// Sum of `octaves` noise layers starting at `wavelength` meters, each
/// half the wavelength and half the amplitude of the previous one.
/// Normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Fbm {
    pub seed: u64,
    pub wavelength: f64,
    pub octaves: u32,
}

impl Fbm {
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let mut freq = 1.0 / self.wavelength;
        let mut amp = 1.0;
        let mut sum = 0.0;
        let mut norm = 0.0;
        for o in 0..self.octaves.max(1) {
            // Per-octave offsets keep lattice points of different octaves apart.
            let s = mix64(self.seed.wrapping_add(o as u64));
            sum += amp * value_noise(s, x * freq + 0.37 * o as f64, y * freq + 0.71 * o as f64);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}
