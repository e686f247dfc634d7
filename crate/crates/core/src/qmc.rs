//! Owen-scrambled Sobol' points.
//!
//! Direction numbers are built in-process: primitive polynomials over GF(2)
//! are enumerated by degree, and each dimension's free initial direction
//! numbers are chosen greedily from a fixed candidate stream to minimise the
//! t-values of its two-dimensional projections against all earlier
//! dimensions. The table is deterministic and shared by every sequence.

use std::sync::{Mutex, OnceLock};

use rand::RngCore;

use crate::rng::RngStream;

const BITS: usize = 32;
/// log2 of the point counts whose 2-D projections the greedy search scores.
const SCORED_LEVELS: [usize; 4] = [4, 5, 6, 7];

/// Generator matrix of one dimension: column `i` is the direction number
/// `V_{i+1}`, left-aligned in 32 bits.
type Generator = [u32; BITS];

fn degree(poly: u64) -> u32 {
    63 - poly.leading_zeros()
}

/// `x` generates the multiplicative group of GF(2)[x]/(poly).
fn is_primitive(poly: u64) -> bool {
    let deg = degree(poly);
    if poly & 1 == 0 {
        return false;
    }
    let order = (1u64 << deg) - 1;
    let top = 1u64 << deg;
    let mut v = 1u64;
    for k in 1..=order {
        v <<= 1;
        if v & top != 0 {
            v ^= poly;
        }
        if v == 1 {
            return k == order;
        }
    }
    false
}

/// Primitive polynomials in increasing degree (bit `i` = coefficient of `x^i`).
fn primitive_polynomials() -> impl Iterator<Item = u64> {
    (1u32..31).flat_map(|deg| {
        let lo = 1u64 << deg;
        (lo..lo << 1).filter(|&p| is_primitive(p))
    })
}

fn generator_from(poly: u64, initial: &[u32]) -> Generator {
    let s = degree(poly) as usize;
    let mut m = vec![0u64; BITS + 1];
    for (i, &v) in initial.iter().enumerate() {
        m[i + 1] = v as u64;
    }
    for i in s + 1..=BITS {
        let mut v = m[i - s] ^ (m[i - s] << s);
        for k in 1..s {
            if (poly >> (s - k)) & 1 == 1 {
                v ^= m[i - k] << k;
            }
        }
        m[i] = v;
    }
    let mut g = [0u32; BITS];
    for i in 1..=BITS {
        g[i - 1] = (m[i] << (BITS - i)) as u32;
    }
    g
}

fn van_der_corput() -> Generator {
    let mut g = [0u32; BITS];
    for (i, v) in g.iter_mut().enumerate() {
        *v = 1u32 << (BITS - 1 - i);
    }
    g
}

/// Rows `0..m` of the `m x m` leading block, each row a bitmask over columns.
fn rows(g: &Generator, m: usize) -> Vec<u32> {
    (0..m)
        .map(|r| {
            (0..m).fold(0u32, |acc, c| acc | (((g[c] >> (BITS - 1 - r)) & 1) << c))
        })
        .collect()
}

fn independent(vectors: impl Iterator<Item = u32>) -> bool {
    let mut basis = [0u32; BITS];
    for mut v in vectors {
        loop {
            if v == 0 {
                return false;
            }
            let hi = 31 - v.leading_zeros() as usize;
            if basis[hi] == 0 {
                basis[hi] = v;
                break;
            }
            v ^= basis[hi];
        }
    }
    true
}

/// t-value of the two-dimensional digital net formed by the first `2^m`
/// points of a pair of dimensions.
fn t_value(r1: &[u32], r2: &[u32], m: usize) -> usize {
    let mut quality = 0;
    for d in 1..=m {
        let ok = (0..=d).all(|d1| independent(r1[..d1].iter().chain(&r2[..d - d1]).copied()));
        if !ok {
            break;
        }
        quality = d;
    }
    m - quality
}

struct Table {
    generators: Vec<Generator>,
    rows: Vec<Vec<Vec<u32>>>,
    polys: Box<dyn Iterator<Item = u64> + Send>,
    candidates: RngStream,
}

impl Table {
    fn new() -> Self {
        let mut t = Table {
            generators: Vec::new(),
            rows: Vec::new(),
            polys: Box::new(primitive_polynomials()),
            candidates: RngStream::new(0x5EED_0F50_B01D, 0),
        };
        t.push(van_der_corput());
        t
    }

    fn push(&mut self, g: Generator) {
        self.rows
            .push(SCORED_LEVELS.iter().map(|&m| rows(&g, m)).collect());
        self.generators.push(g);
    }

    fn score(&self, g: &Generator) -> usize {
        let mine: Vec<Vec<u32>> = SCORED_LEVELS.iter().map(|&m| rows(g, m)).collect();
        self.rows
            .iter()
            .map(|other| {
                SCORED_LEVELS
                    .iter()
                    .enumerate()
                    .map(|(l, &m)| t_value(&other[l], &mine[l], m))
                    .sum::<usize>()
            })
            .sum()
    }

    fn extend_to(&mut self, dims: usize) {
        while self.generators.len() < dims {
            let poly = self.polys.next().expect("enough primitive polynomials");
            let s = degree(poly) as usize;
            let tries = if self.generators.len() < 160 { 16 } else { 2 };
            let mut best: Option<(usize, Generator)> = None;
            for _ in 0..tries {
                let initial: Vec<u32> = (1..=s)
                    .map(|i| {
                        if i >= 32 {
                            1
                        } else {
                            (self.candidates.next_u32() & ((1u32 << i) - 1)) | 1
                        }
                    })
                    .collect();
                let g = generator_from(poly, &initial);
                let score = self.score(&g);
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, g));
                }
            }
            self.push(best.expect("at least one candidate").1);
        }
    }
}

fn generators(dims: usize) -> Vec<Generator> {
    static TABLE: OnceLock<Mutex<Table>> = OnceLock::new();
    let mut t = TABLE
        .get_or_init(|| Mutex::new(Table::new()))
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    t.extend_to(dims);
    t.generators[..dims].to_vec()
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Nested uniform (Owen) scramble of a 32-bit fraction: each bit is flipped
/// by a random function of the bits above it.
fn owen_scramble(v: u32, seed: u64) -> u32 {
    let mut out = 0u32;
    for level in 0..BITS {
        let bit = BITS - 1 - level;
        let prefix = if level == 0 { 0 } else { (v >> (BITS - level)) as u64 };
        let flip = (mix64(seed ^ mix64(((level as u64) << 40) ^ prefix)) & 1) as u32;
        out |= (((v >> bit) & 1) ^ flip) << bit;
    }
    out
}

/// Sobol' sequence with an independent Owen scramble per dimension.
#[derive(Debug, Clone)]
pub struct ScrambledSobol {
    generators: Vec<Generator>,
    seeds: Vec<u64>,
}

impl ScrambledSobol {
    pub fn new(dims: usize, rng: &mut RngStream) -> Self {
        let generators = generators(dims);
        let seeds = (0..dims).map(|_| rng.next_u64()).collect();
        Self { generators, seeds }
    }

    pub fn dims(&self) -> usize {
        self.generators.len()
    }

    /// Unscrambled 32-bit coordinate of point `index`.
    fn raw(&self, index: u32, dim: usize) -> u32 {
        let g = &self.generators[dim];
        let mut v = 0u32;
        let mut k = index;
        let mut c = 0;
        while k != 0 {
            if k & 1 == 1 {
                v ^= g[c];
            }
            k >>= 1;
            c += 1;
        }
        v
    }

    /// Coordinate `dim` of point `index`, strictly inside `(0, 1)`.
    pub fn value(&self, index: u32, dim: usize) -> f64 {
        let s = owen_scramble(self.raw(index, dim), self.seeds[dim]);
        (s as f64 + 0.5) / 4_294_967_296.0
    }

    pub fn point(&self, index: u32) -> Vec<f64> {
        (0..self.dims()).map(|d| self.value(index, d)).collect()
    }

    pub fn points(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n as u32).map(|i| self.point(i)).collect()
    }
}
