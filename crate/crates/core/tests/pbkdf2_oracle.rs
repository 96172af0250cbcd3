mod common;

use common::{avalanche, hex, hmac_sha256, pbkdf2_sha256};
use proface::keygen::{derive_bitmap, derive_bytes, KeygenConfig, SecretKey, DEFAULT_SALT};

#[test]
fn hmac_oracle_matches_published_vectors() {
    // RFC 4231 cases 1 and 6
    assert_eq!(
        hex(&hmac_sha256(&[0x0b; 20], b"Hi There")),
        "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
    );
    assert_eq!(
        hex(&hmac_sha256(&[0xaa; 131], b"Test Using Larger Than Block-Size Key - Hash Key First")),
        "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54"
    );
}

#[test]
fn pbkdf2_oracle_matches_published_vectors() {
    // RFC 7914 section 11
    assert_eq!(
        hex(&pbkdf2_sha256(b"passwd", b"salt", 1, 64)),
        "55ac046e56e3089fec1691c22544b605f94185216dde0465e68b9d57c20dacbc\
         49ca9cccf179b645991664b39d77ef317c71b845b1e30bd509112041d3a19783"
    );
}

#[test]
fn derive_bytes_matches_oracle() {
    let passwords: [&[u8]; 5] = [b"a", b"correct horse", b"\x00\xff\x10", &[7u8; 100], "p\u{e4}ss".as_bytes()];
    let salts: [&[u8]; 3] = [DEFAULT_SALT, b"", b"another salt of some length"];
    for pw in passwords {
        for salt in salts {
            for iterations in [1, 2, 10, 37] {
                let cfg = KeygenConfig {
                    salt: salt.to_vec(),
                    iterations,
                    ..KeygenConfig::default()
                };
                for len in [1, 31, 32, 33, 200, 1568] {
                    let ours = derive_bytes(&SecretKey::new(pw).unwrap(), &cfg, len);
                    assert_eq!(ours, pbkdf2_sha256(pw, salt, iterations, len), "{pw:?} {salt:?} {iterations} {len}");
                }
            }
        }
    }
}

#[test]
fn bitmap_expands_msb_first() {
    let key = SecretKey::new("bits").unwrap();
    let cfg = KeygenConfig::default();
    let bytes = pbkdf2_sha256(b"bits", DEFAULT_SALT, 10, 8);
    let map = derive_bitmap(&key, 8, 8, &cfg).unwrap();
    for (i, &s) in map.signs().iter().enumerate() {
        let bit = (bytes[i / 8] >> (7 - i % 8)) & 1;
        assert_eq!(s, if bit == 1 { 1 } else { -1 }, "bit {i}");
    }
}

#[test]
fn one_bit_password_flips_change_half_the_map() {
    let (mean, lo, hi) = avalanche(100, 32, 5);
    assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    assert!(lo > 0.3 && hi < 0.7, "range {lo}..{hi}");
}
