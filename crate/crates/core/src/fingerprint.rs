use serde::Serialize;
use sha2::{Digest, Sha256};

/// Short hex digest of a value's JSON serialization.
///
/// Struct fields serialize in declaration order, so the digest is stable
/// for a given type layout.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprinted types serialize infallibly");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Probe {
        a: u32,
        b: &'static str,
    }

    #[test]
    fn stable_and_sensitive() {
        let x = fingerprint(&Probe { a: 1, b: "x" });
        assert_eq!(x.len(), 16);
        assert_eq!(x, fingerprint(&Probe { a: 1, b: "x" }));
        assert_ne!(x, fingerprint(&Probe { a: 2, b: "x" }));
    }
}
