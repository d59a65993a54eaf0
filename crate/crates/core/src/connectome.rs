//! Permanent random connectomes.
//!
//! A connectome is a permutation of the `E` expanded channels, drawn once
//! and never changed, together with the channel max-pool window `cmp`.
//! Output slot `j` pools over channels `perm[j·cmp .. (j+1)·cmp]`, so the
//! supports partition `[0, E)`.

use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::rng::Rng;

pub const BLOB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Connectome {
    perm: Vec<usize>,
    cmp: usize,
    seed: u64,
    randomized: bool,
}

impl Connectome {
    /// Draws the permutation from a fresh stream seeded with `seed`
    /// (exactly `E - 1` draws), or uses the identity when `randomized` is
    /// false. Rebuilding with the same arguments yields the same wiring.
    pub fn build(seed: u64, expansion: usize, cmp: usize, randomized: bool) -> Result<Self> {
        check_geometry(expansion, cmp)?;
        let perm = if randomized {
            Rng::new(seed).permutation(expansion)?
        } else {
            (0..expansion).collect()
        };
        Ok(Self {
            perm,
            cmp,
            seed,
            randomized,
        })
    }

    /// Takes one draw from `rng` as the connectome seed, then builds.
    pub fn build_from(rng: &mut Rng, expansion: usize, cmp: usize, randomized: bool) -> Result<Self> {
        let seed = rng.next_u64();
        Self::build(seed, expansion, cmp, randomized)
    }

    /// Wraps an explicit permutation after validating it.
    pub fn from_perm(perm: Vec<usize>, cmp: usize, seed: u64, randomized: bool) -> Result<Self> {
        check_geometry(perm.len(), cmp)?;
        check_bijection(&perm)?;
        if !randomized && perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(config_err("non-randomized connectome must be the identity"));
        }
        Ok(Self {
            perm,
            cmp,
            seed,
            randomized,
        })
    }

    pub fn expansion(&self) -> usize {
        self.perm.len()
    }

    pub fn cmp(&self) -> usize {
        self.cmp
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn randomized(&self) -> bool {
        self.randomized
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Number of pooling units, `E / cmp`.
    pub fn outputs(&self) -> usize {
        self.perm.len() / self.cmp
    }

    /// Channels pooled by output slot `j`, in permuted order.
    pub fn support(&self, j: usize) -> &[usize] {
        &self.perm[j * self.cmp..(j + 1) * self.cmp]
    }

    pub fn supports(&self) -> impl Iterator<Item = &[usize]> {
        self.perm.chunks_exact(self.cmp)
    }

    /// Stable digest of the applied index map.
    pub fn index_hash(&self) -> u64 {
        index_hash(&self.perm)
    }

    /// Little-endian blob: version u32, E u32, cmp u32, randomized u8,
    /// seed u64, perm length u32, then perm entries as u32.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + 4 * self.perm.len());
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.perm.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.cmp as u32).to_le_bytes());
        out.push(self.randomized as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.perm.len() as u32).to_le_bytes());
        for &p in &self.perm {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported connectome version {version}"
            )));
        }
        let expansion = r.u32()? as usize;
        let cmp = r.u32()? as usize;
        let randomized = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Corrupt(format!("invalid randomized flag {b}"))),
        };
        let seed = r.u64()?;
        let len = r.u32()? as usize;
        if len != expansion {
            return Err(Error::Corrupt(format!(
                "perm length {len} disagrees with expansion {expansion}"
            )));
        }
        if r.remaining() != 4 * len {
            return Err(Error::Corrupt(format!(
                "expected {} perm bytes, found {}",
                4 * len,
                r.remaining()
            )));
        }
        let perm = (0..len)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        Self::from_perm(perm, cmp, seed, randomized).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

pub fn index_hash(perm: &[usize]) -> u64 {
    let mut h = Sha256::new();
    for &p in perm {
        h.update((p as u32).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has at least 8 bytes"))
}

fn check_geometry(expansion: usize, cmp: usize) -> Result<()> {
    if expansion == 0 {
        return Err(config_err("connectome needs at least one channel"));
    }
    if cmp == 0 || expansion % cmp != 0 {
        return Err(config_err(format!(
            "channel max-pool window {cmp} does not divide expansion {expansion}"
        )));
    }
    Ok(())
}

fn check_bijection(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(config_err(format!(
                "index {p} repeated or out of range in permutation of {}",
                perm.len()
            )));
        }
    }
    Ok(())
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated at offset {}: need {n} more bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(s: &[usize]) -> Vec<usize> {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    }

    #[test]
    fn identity_supports() {
        let c = Connectome::build(0, 4, 2, false).unwrap();
        let s: Vec<&[usize]> = c.supports().collect();
        assert_eq!(s, vec![&[0, 1][..], &[2, 3][..]]);
    }

    #[test]
    fn random_supports_partition_and_repeat() {
        let c = Connectome::build(11, 6, 3, true).unwrap();
        assert_eq!(c.outputs(), 2);
        assert!(c.supports().all(|s| s.len() == 3));
        let mut all: Vec<usize> = c.supports().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert_eq!(Connectome::build(11, 6, 3, true).unwrap(), c);
    }

    #[test]
    fn grouped_expansion_pairs() {
        // inch=2, G=12 -> E=24, CMP=2 -> 12 disjoint pairs.
        let c = Connectome::build(5, 2 * 12, 2, true).unwrap();
        assert_eq!(c.supports().count(), 12);
        let union: Vec<usize> = sorted(&c.supports().flatten().copied().collect::<Vec<_>>());
        assert_eq!(union, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn cmp_must_divide_expansion() {
        assert!(matches!(
            Connectome::build(0, 6, 4, true),
            Err(Error::Config(_))
        ));
        assert!(Connectome::build(0, 0, 1, true).is_err());
    }

    #[test]
    fn round_trip() {
        for (seed, e, cmp, r) in [(3, 4, 2, true), (9, 12, 3, false), (u64::MAX, 288, 2, true)] {
            let c = Connectome::build(seed, e, cmp, r).unwrap();
            assert_eq!(Connectome::deserialize(&c.serialize()).unwrap(), c);
        }
    }

    #[test]
    fn corrupt_payloads_rejected() {
        let c = Connectome::build(3, 4, 2, true).unwrap();
        let mut blob = c.serialize();
        assert!(Connectome::deserialize(&blob[..blob.len() - 1]).is_err());
        // duplicate an index
        let n = blob.len();
        let first = blob[n - 16..n - 12].to_vec();
        blob[n - 12..n - 8].copy_from_slice(&first);
        assert!(matches!(Connectome::deserialize(&blob), Err(Error::Corrupt(_))));
        // identity flag with a shuffled perm
        let mut blob = Connectome::from_perm(vec![1, 0], 1, 0, true).unwrap().serialize();
        blob[12] = 0;
        assert!(Connectome::deserialize(&blob).is_err());
    }

    #[test]
    fn golden_blob_is_stable() {
        let c = Connectome::build(3, 4, 2, true).unwrap();
        assert_eq!(hex(&c.serialize()), GOLDEN_E4_SEED3);
    }

    const GOLDEN_E4_SEED3: &str =
        "0100000004000000020000000103000000000000000400000003000000020000000000000001000000";

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }
}
