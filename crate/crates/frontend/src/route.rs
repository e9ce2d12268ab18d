//! Function-hash routing over an ordered replica list.

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingTable {
    pub replicas: Vec<String>,
    pub generation: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("no data plane replica is available")]
pub struct NoReplicas;

impl RoutingTable {
    pub fn new(replicas: Vec<String>, generation: u64) -> Self {
        Self {
            replicas,
            generation,
        }
    }

    /// `replicas[fnv1a64(name) mod len]`.
    pub fn route(&self, function: &str) -> Result<&str, NoReplicas> {
        if self.replicas.is_empty() {
            return Err(NoReplicas);
        }
        let i = fnv1a64(function.as_bytes()) % self.replicas.len() as u64;
        Ok(&self.replicas[i as usize])
    }
}
