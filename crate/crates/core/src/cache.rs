//! Single-level set-associative data cache with LRU replacement and fixed
//! hit/miss latencies. Addresses given to it are already physical.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("line size {0} is not a power of two")]
    LineSize(u64),
    #[error("set count {0} is not a power of two")]
    Sets(usize),
    #[error("way count must be at least 1")]
    Ways,
    #[error("miss latency {miss} must exceed hit latency {hit}")]
    Latency { hit: u64, miss: u64 },
    #[error("threshold {threshold} must lie strictly between hit latency {hit} and miss latency {miss}")]
    Threshold { threshold: u64, hit: u64, miss: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub line_size: u64,
    pub sets: usize,
    pub ways: usize,
    pub hit_latency: u64,
    pub miss_latency: u64,
    /// Uniform latency noise of +/- this many cycles. Zero disables it.
    pub jitter: u64,
    pub jitter_seed: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_size: 64,
            sets: 64,
            ways: 8,
            hit_latency: 40,
            miss_latency: 300,
            jitter: 0,
            jitter_seed: 0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        if !self.line_size.is_power_of_two() {
            return Err(CacheError::LineSize(self.line_size));
        }
        if !self.sets.is_power_of_two() {
            return Err(CacheError::Sets(self.sets));
        }
        if self.ways == 0 {
            return Err(CacheError::Ways);
        }
        if self.miss_latency <= self.hit_latency {
            return Err(CacheError::Latency { hit: self.hit_latency, miss: self.miss_latency });
        }
        Ok(())
    }

    /// Midpoint between hit and miss latency.
    pub fn default_threshold(&self) -> u64 {
        (self.hit_latency + self.miss_latency) / 2
    }

    pub fn check_threshold(&self, threshold: u64) -> Result<(), CacheError> {
        if threshold <= self.hit_latency || threshold >= self.miss_latency {
            return Err(CacheError::Threshold { threshold, hit: self.hit_latency, miss: self.miss_latency });
        }
        Ok(())
    }

    /// Flush+Reload decision: `Cached` iff `latency < threshold`.
    pub fn classify(&self, latency: u64, threshold: u64) -> Result<Residency, CacheError> {
        self.check_threshold(threshold)?;
        Ok(if latency < threshold { Residency::Cached } else { Residency::Uncached })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Cached,
    Uncached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub hit: bool,
    pub latency: u64,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    cfg: CacheConfig,
    // per set, LRU first, MRU last; entries are line numbers
    sets: Vec<Vec<u64>>,
    accesses: u64,
    rng: Option<ChaCha8Rng>,
}

impl PartialEq for CacheState {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.sets == other.sets
    }
}

impl CacheState {
    pub fn new(cfg: CacheConfig) -> Result<CacheState, CacheError> {
        cfg.validate()?;
        let rng = (cfg.jitter > 0).then(|| ChaCha8Rng::seed_from_u64(cfg.jitter_seed));
        Ok(CacheState { sets: vec![Vec::with_capacity(cfg.ways); cfg.sets], cfg, accesses: 0, rng })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    fn locate(&self, addr: u64) -> (usize, u64) {
        let line = addr / self.cfg.line_size;
        ((line % self.cfg.sets as u64) as usize, line)
    }

    fn latency(&mut self, base: u64) -> u64 {
        match self.rng.as_mut() {
            Some(rng) => {
                let j = self.cfg.jitter as i64;
                let noisy = base as i64 + rng.gen_range(-j..=j);
                noisy.max(1) as u64
            }
            None => base,
        }
    }

    pub fn access(&mut self, addr: u64) -> Access {
        self.accesses += 1;
        let ways = self.cfg.ways;
        let (set, line) = self.locate(addr);
        let lines = &mut self.sets[set];
        let hit = match lines.iter().position(|&l| l == line) {
            Some(pos) => {
                lines.remove(pos);
                lines.push(line);
                true
            }
            None => {
                if lines.len() == ways {
                    lines.remove(0);
                }
                lines.push(line);
                false
            }
        };
        let base = if hit { self.cfg.hit_latency } else { self.cfg.miss_latency };
        Access { hit, latency: self.latency(base) }
    }

    pub fn flush(&mut self, addr: u64) {
        let (set, line) = self.locate(addr);
        self.sets[set].retain(|&l| l != line);
    }

    /// Residency check that leaves LRU order untouched.
    pub fn contains(&self, addr: u64) -> bool {
        let (set, line) = self.locate(addr);
        self.sets[set].contains(&line)
    }

    pub fn access_count(&self) -> u64 {
        self.accesses
    }

    pub fn resident_lines(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}
