use sha2::{Digest, Sha256};

/// Expand a master seed into an independent seed for one purpose and index.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_purposes_and_indices() {
        let a = derive_seed(1, "permute", 1);
        assert_eq!(a, derive_seed(1, "permute", 1));
        assert_ne!(a, derive_seed(1, "permute", 2));
        assert_ne!(a, derive_seed(1, "order", 1));
        assert_ne!(a, derive_seed(2, "permute", 1));
    }
}
