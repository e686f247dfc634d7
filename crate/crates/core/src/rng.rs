//! Counter-based random streams.
//!
//! Every stream is a Philox4x32-10 generator keyed by the run seed, with the
//! stream id occupying the upper half of the 128-bit counter. Draws are a pure
//! function of `(seed, stream_id, position)`, so results never depend on
//! scheduling, and any position can be reached without replaying the stream.

use rand::RngCore;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 block function with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// SplitMix64 finalizer, used to derive child stream ids.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit_open(w: u32) -> f64 {
    // (w + 0.5) / 2^32 lies strictly inside (0, 1).
    (w as f64 + 0.5) * (1.0 / 4_294_967_296.0)
}

#[inline]
fn box_muller(a: u32, b: u32) -> (f64, f64) {
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    let theta = std::f64::consts::TAU * unit_open(b);
    let (s, c) = theta.sin_cos();
    (r * c, r * s)
}

/// Well-known stream tags for the toolkit's subsystems.
pub mod tags {
    pub const EXPLAIN_ATTACK: u64 = 0x4558_504c_4154_4b00;
    pub const EVAL_ATTACK: u64 = 0x4556_414c_4154_4b00;
    pub const LIME: u64 = 0x4c49_4d45;
    pub const SHAP: u64 = 0x5348_4150;
    pub const SOBOL: u64 = 0x534f_424f_4c;
    pub const RISE: u64 = 0x5249_5345;
    pub const SLIC: u64 = 0x534c_4943;
    pub const NOISE: u64 = 0x4e4f_4953_45;
    pub const SUITE: u64 = 0x5355_4954_45;
}

/// A seeded, splittable random stream.
///
/// Sequential draws go through [`RngCore`]; [`RngStream::normal_at`] gives
/// random access to a standard-normal field indexed independently of the
/// sequential position.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    block: u64,
    buf: [u32; 4],
    used: usize,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            block: 0,
            buf: [0; 4],
            used: 4,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent child stream; the parent is not advanced.
    pub fn split(&self, tag: u64) -> RngStream {
        let id = mix64(self.stream_id ^ mix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)));
        RngStream::new(self.seed, id)
    }

    /// Convenience for splitting along several tags in order.
    pub fn split_path(&self, path: &[u64]) -> RngStream {
        path.iter().fold(self.clone(), |s, &t| s.split(t))
    }

    #[inline]
    fn key(&self) -> [u32; 2] {
        [self.seed as u32, (self.seed >> 32) as u32]
    }

    #[inline]
    fn block_at(&self, block: u64) -> [u32; 4] {
        philox4x32_10(
            [
                block as u32,
                (block >> 32) as u32,
                self.stream_id as u32,
                (self.stream_id >> 32) as u32,
            ],
            self.key(),
        )
    }

    /// Standard-normal value at `index` in this stream's addressable field.
    ///
    /// Addressable draws use the top half of the block space so they never
    /// collide with sequential draws from the same stream.
    #[inline]
    pub fn normal_at(&self, index: u64) -> f64 {
        self.normal_quad(index >> 2)[(index & 3) as usize]
    }

    /// Fill `out` with the addressable normals `0..out.len()`.
    pub fn fill_normals(&self, out: &mut [f64]) {
        for (chunk_idx, chunk) in out.chunks_mut(4).enumerate() {
            let quad = self.normal_quad(chunk_idx as u64);
            for (slot, v) in chunk.iter_mut().zip(quad) {
                *slot = v;
            }
        }
    }

    /// Addressable normals at `indices`, appended to `out`.
    ///
    /// Neighbouring indices share a Philox block, so ascending runs cost about
    /// as much as [`RngStream::fill_normals`].
    pub fn normals_at<I: IntoIterator<Item = u64>>(&self, indices: I, out: &mut Vec<f64>) {
        let mut cached = u64::MAX;
        let mut quad = [0.0; 4];
        for i in indices {
            let block = i >> 2;
            if block != cached {
                quad = self.normal_quad(block);
                cached = block;
            }
            out.push(quad[(i & 3) as usize]);
        }
    }

    #[inline]
    fn normal_quad(&self, block: u64) -> [f64; 4] {
        let words = self.block_at((1u64 << 63) | block);
        let (a, b) = box_muller(words[0], words[1]);
        let (c, d) = box_muller(words[2], words[3]);
        [a, b, c, d]
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's nearly-divisionless method).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n || lo >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.buf = self.block_at(self.block);
            self.block += 1;
            self.used = 0;
        }
        let w = self.buf[self.used];
        self.used += 1;
        w
    }

    fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        let hi = self.next_u32() as u64;
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(4) {
            let w = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

/// i.i.d. standard-normal samples for a tensor of `len` elements.
///
/// Deterministic in `(seed, stream_id)`; advancing is expressed by splitting.
pub fn gaussian_noise(rng: &RngStream, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    rng.fill_normals(&mut out);
    out
}
