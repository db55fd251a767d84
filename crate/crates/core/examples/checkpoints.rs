//! Save, reload and fingerprint a checkpoint, then show how damaged files
//! are reported.
//!
//!     cargo run --example checkpoints

use std::path::Path;

use mergelab::models::checkpoint::{decode, digest, encode};
use mergelab::models::{load_checkpoint, save_checkpoint, Architecture, MlpEncoder};
use mergelab::numkit::Rng;

fn main() -> mergelab::Result<()> {
    let dir = tempfile_dir();
    let path = dir.join("encoder.ckpt");
    let enc = MlpEncoder::init(&Architecture::default(), &mut Rng::new(0))?;
    save_checkpoint(enc.params(), &path)?;
    let back = load_checkpoint(&path)?;
    println!("layers:");
    for l in back.layers() {
        println!("  {:<14} {:?}", l.name(), l.shape());
    }
    println!("bit-exact reload: {}", back.bitwise_eq(enc.params()));
    println!("sha256: {}", digest(&back));

    let bytes = encode(&back);
    let mut wrong_magic = bytes.clone();
    wrong_magic[..4].copy_from_slice(b"NOPE");
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 7;
    let cases: [(&str, &[u8]); 3] = [
        ("magic", &wrong_magic),
        ("version", &wrong_version),
        ("truncated", &bytes[..bytes.len() / 2]),
    ];
    for (what, b) in cases {
        match decode(b, Path::new("damaged.ckpt")) {
            Ok(_) => println!("{what}: unexpectedly decoded"),
            Err(e) => println!("{what}: {e} (exit code {})", e.exit_code()),
        }
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mergelab-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
