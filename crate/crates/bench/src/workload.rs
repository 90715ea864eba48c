//! YCSB-style workload generation: Load A and Run A-D op mixes, Zipfian
//! key popularity (latest for Run D), and the S/M/L value-size mixes.
//! Streams are fully determined by (spec, mix, seed).

use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};

/// Fixed key envelope: 2-byte hash prefix (spreads keys over the range
/// partition) + 12-byte printable id.
pub const KEY_LEN: usize = 14;

/// KV pair totals per size class; value length is total minus key.
pub const SMALL_TOTAL: usize = 33;
pub const MEDIUM_TOTAL: usize = 123;
pub const LARGE_TOTAL: usize = 1023;

pub const ZIPF_THETA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    LoadA,
    RunA,
    RunB,
    RunC,
    RunD,
}

impl Phase {
    /// Fraction of reads in the mix; the remainder writes.
    pub fn read_fraction(self) -> f64 {
        match self {
            Phase::LoadA => 0.0,
            Phase::RunA => 0.5,
            Phase::RunB => 0.95,
            Phase::RunC => 1.0,
            Phase::RunD => 0.95,
        }
    }

    /// Run D's writes insert fresh keys; A/B update existing ones.
    pub fn writes_insert(self) -> bool {
        matches!(self, Phase::LoadA | Phase::RunD)
    }

    /// Run D reads favor the most recent inserts instead of Zipfian.
    pub fn latest_distribution(self) -> bool {
        self == Phase::RunD
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::LoadA => "loadA",
            Phase::RunA => "runA",
            Phase::RunB => "runB",
            Phase::RunC => "runC",
            Phase::RunD => "runD",
        }
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Phase, String> {
        match s.to_ascii_lowercase().as_str() {
            "loada" | "load" => Ok(Phase::LoadA),
            "runa" | "a" => Ok(Phase::RunA),
            "runb" | "b" => Ok(Phase::RunB),
            "runc" | "c" => Ok(Phase::RunC),
            "rund" | "d" => Ok(Phase::RunD),
            other => Err(format!("unknown workload {other:?}")),
        }
    }
}

/// Percentage mix of small/medium/large KV pairs; must sum to 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeMix {
    pub small: u8,
    pub medium: u8,
    pub large: u8,
}

impl SizeMix {
    pub const S: SizeMix = SizeMix { small: 100, medium: 0, large: 0 };
    pub const M: SizeMix = SizeMix { small: 0, medium: 100, large: 0 };
    pub const L: SizeMix = SizeMix { small: 0, medium: 0, large: 100 };
    pub const SD: SizeMix = SizeMix { small: 60, medium: 20, large: 20 };
    pub const MD: SizeMix = SizeMix { small: 20, medium: 60, large: 20 };
    pub const LD: SizeMix = SizeMix { small: 20, medium: 20, large: 60 };

    /// Small-KV sweep point: the remainder splits evenly between M and L.
    pub fn small_heavy(small_pct: u8) -> SizeMix {
        assert!(small_pct <= 100);
        let rest = 100 - small_pct;
        SizeMix {
            small: small_pct,
            medium: rest / 2,
            large: rest - rest / 2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let sum = self.small as u32 + self.medium as u32 + self.large as u32;
        if sum != 100 {
            return Err(format!("size mix sums to {sum}, want 100"));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match *self {
            SizeMix::S => "S".into(),
            SizeMix::M => "M".into(),
            SizeMix::L => "L".into(),
            SizeMix::SD => "SD".into(),
            SizeMix::MD => "MD".into(),
            SizeMix::LD => "LD".into(),
            SizeMix { small, medium, large } => format!("{small}-{medium}-{large}"),
        }
    }

    fn value_len<R: Rng>(&self, rng: &mut R) -> usize {
        let roll = rng.gen_range(0u32..100);
        let total = if roll < self.small as u32 {
            SMALL_TOTAL
        } else if roll < self.small as u32 + self.medium as u32 {
            MEDIUM_TOTAL
        } else {
            LARGE_TOTAL
        };
        total - KEY_LEN
    }
}

impl FromStr for SizeMix {
    type Err = String;
    fn from_str(s: &str) -> Result<SizeMix, String> {
        let mix = match s.to_ascii_uppercase().as_str() {
            "S" => SizeMix::S,
            "M" => SizeMix::M,
            "L" => SizeMix::L,
            "SD" => SizeMix::SD,
            "MD" => SizeMix::MD,
            "LD" => SizeMix::LD,
            other => {
                let parts: Vec<u8> = other
                    .split('-')
                    .map(|p| p.parse().map_err(|_| format!("bad size mix {s:?}")))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err(format!("bad size mix {s:?}"));
                }
                SizeMix { small: parts[0], medium: parts[1], large: parts[2] }
            }
        };
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WorkloadSpec {
    pub phase: Phase,
    pub ops: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Insert { id: u64, value_len: usize },
    Update { id: u64, value_len: usize },
    Read { id: u64 },
}

impl Op {
    pub fn id(&self) -> u64 {
        match *self {
            Op::Insert { id, .. } | Op::Update { id, .. } | Op::Read { id } => id,
        }
    }
}

/// 14-byte key: hashed 2-byte prefix for range spreading + stable id.
pub fn key_bytes(id: u64) -> Vec<u8> {
    let h = (id.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 48) as u16;
    let mut k = h.to_be_bytes().to_vec();
    k.extend_from_slice(format!("user{id:08}").as_bytes());
    debug_assert_eq!(k.len(), KEY_LEN);
    k
}

/// Deterministic value bytes: derived from key id and length so any
/// replica can be checked against the generator without state.
pub fn value_bytes(id: u64, len: usize) -> Vec<u8> {
    let mut v = Vec::with_capacity(len);
    let mut x = id.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(len as u64);
    while v.len() < len {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        v.extend_from_slice(&x.to_le_bytes());
    }
    v.truncate(len);
    v
}

fn scramble(rank: u64, n: u64) -> u64 {
    // FNV-style mix so popular Zipf ranks are not adjacent key ids.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    h ^= rank;
    h = h.wrapping_mul(0x100_0000_01b3);
    h ^= rank >> 7;
    h = h.wrapping_mul(0x100_0000_01b3);
    h % n
}

/// Deterministic op stream. `preloaded` is the key count already in the
/// store (0 for LoadA, whose inserts are keys 0..ops).
pub fn generate_ops(spec: &WorkloadSpec, mix: &SizeMix, preloaded: u64, seed: u64) -> Vec<Op> {
    mix.validate().expect("valid size mix");
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ops = Vec::with_capacity(spec.ops as usize);
    if spec.phase == Phase::LoadA {
        for id in 0..spec.ops {
            let value_len = mix.value_len(&mut rng);
            ops.push(Op::Insert { id, value_len });
        }
        return ops;
    }
    assert!(preloaded > 0, "run phases need a preloaded keyspace");
    let mut inserted = preloaded;
    let zipf = Zipf::new(preloaded, ZIPF_THETA).expect("zipf parameters");
    let read_fraction = spec.phase.read_fraction();
    for _ in 0..spec.ops {
        let is_read = rng.gen_bool(read_fraction.min(1.0));
        if is_read {
            let id = if spec.phase.latest_distribution() {
                // Rank 1 = most recently inserted key.
                let back = (zipf.sample(&mut rng) as u64).min(inserted);
                inserted - back
            } else {
                scramble(zipf.sample(&mut rng) as u64, preloaded)
            };
            let id = id.min(inserted - 1);
            ops.push(Op::Read { id });
        } else if spec.phase.writes_insert() {
            let value_len = mix.value_len(&mut rng);
            ops.push(Op::Insert { id: inserted, value_len });
            inserted += 1;
        } else {
            let id = scramble(zipf.sample(&mut rng) as u64, preloaded);
            let value_len = mix.value_len(&mut rng);
            ops.push(Op::Update { id, value_len });
        }
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_a_is_pure_inserts() {
        let spec = WorkloadSpec { phase: Phase::LoadA, ops: 100, threads: 1 };
        let ops = generate_ops(&spec, &SizeMix::S, 0, 7);
        assert_eq!(ops.len(), 100);
        assert!(ops.iter().all(|o| matches!(o, Op::Insert { .. })));
        // Sequential fresh keys.
        assert_eq!(ops[99].id(), 99);
    }

    #[test]
    fn run_a_is_half_reads_within_a_percent() {
        let spec = WorkloadSpec { phase: Phase::RunA, ops: 10_000, threads: 1 };
        let ops = generate_ops(&spec, &SizeMix::SD, 1000, 42);
        let reads = ops.iter().filter(|o| matches!(o, Op::Read { .. })).count();
        let frac = reads as f64 / ops.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "read fraction {frac}");
        assert!(ops
            .iter()
            .all(|o| !matches!(o, Op::Insert { .. })), "Run A updates, never inserts");
    }

    #[test]
    fn sd_mix_histogram_within_a_percent() {
        let spec = WorkloadSpec { phase: Phase::LoadA, ops: 100_000, threads: 1 };
        let ops = generate_ops(&spec, &SizeMix::SD, 0, 3);
        let mut counts = [0u64; 3];
        for op in &ops {
            if let Op::Insert { value_len, .. } = op {
                match value_len + KEY_LEN {
                    SMALL_TOTAL => counts[0] += 1,
                    MEDIUM_TOTAL => counts[1] += 1,
                    LARGE_TOTAL => counts[2] += 1,
                    other => panic!("unexpected total {other}"),
                }
            }
        }
        let n = ops.len() as f64;
        assert!((counts[0] as f64 / n - 0.60).abs() < 0.01);
        assert!((counts[1] as f64 / n - 0.20).abs() < 0.01);
        assert!((counts[2] as f64 / n - 0.20).abs() < 0.01);
    }

    #[test]
    fn identical_seed_identical_stream() {
        let spec = WorkloadSpec { phase: Phase::RunB, ops: 5000, threads: 1 };
        let a = generate_ops(&spec, &SizeMix::MD, 500, 9);
        let b = generate_ops(&spec, &SizeMix::MD, 500, 9);
        assert_eq!(a, b);
        let c = generate_ops(&spec, &SizeMix::MD, 500, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn run_d_inserts_fresh_keys_and_reads_recent_ones() {
        let spec = WorkloadSpec { phase: Phase::RunD, ops: 10_000, threads: 1 };
        let ops = generate_ops(&spec, &SizeMix::SD, 1000, 11);
        let mut next = 1000u64;
        let mut recent_reads = 0u64;
        let mut reads = 0u64;
        for op in &ops {
            match op {
                Op::Insert { id, .. } => {
                    assert_eq!(*id, next, "inserts append fresh keys in order");
                    next += 1;
                }
                Op::Read { id } => {
                    reads += 1;
                    if next - id <= next / 10 {
                        recent_reads += 1;
                    }
                }
                Op::Update { .. } => panic!("Run D has no updates"),
            }
        }
        // Latest distribution: the newest tenth of keys absorbs most reads.
        assert!(recent_reads as f64 / reads as f64 > 0.5);
    }

    #[test]
    fn size_mix_parsing_and_validation() {
        assert_eq!("SD".parse::<SizeMix>().unwrap(), SizeMix::SD);
        assert_eq!("40-30-30".parse::<SizeMix>().unwrap(), SizeMix { small: 40, medium: 30, large: 30 });
        assert!("40-30-20".parse::<SizeMix>().is_err());
        assert_eq!(SizeMix::small_heavy(40), SizeMix { small: 40, medium: 30, large: 30 });
        assert_eq!(SizeMix::small_heavy(100), SizeMix::S);
    }
}
