//! Session tokens of the form `<reviewer_id>.<hex hmac-sha256>`.

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use crate::store::check_id;

type HmacSha256 = Hmac<Sha256>;

fn mac(secret: &[u8], reviewer_id: &str) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    m.update(b"reviewer:");
    m.update(reviewer_id.as_bytes());
    m
}

pub fn mint_token(secret: &[u8], reviewer_id: &str) -> String {
    let tag = mac(secret, reviewer_id).finalize().into_bytes();
    format!("{reviewer_id}.{}", hex::encode(tag))
}

/// Returns the reviewer a token was minted for, if its signature checks out.
pub fn verify_token(secret: &[u8], token: &str) -> Option<String> {
    let (reviewer, sig) = token.rsplit_once('.')?;
    check_id(reviewer).ok()?;
    let sig = hex::decode(sig).ok()?;
    mac(secret, reviewer).verify_slice(&sig).ok()?;
    Some(reviewer.to_string())
}
