//! Artifact serialization helpers.
//!
//! Every JSON artifact is written compactly with each float rendered at 17
//! significant digits in scientific notation, so files round-trip bit-exactly
//! and diff cleanly between reruns.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone, Copy)]
struct Float17Formatter;

impl serde_json::ser::Formatter for Float17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serializes `value` with 17-significant-digit floats.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Float17Formatter);
    value
        .serialize(&mut ser)
        .expect("in-memory serialization of plain data cannot fail");
    // Formatter only ever emits ASCII.
    String::from_utf8(buf).expect("json output is utf-8")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = to_json_string(value);
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Hex-encoded SHA-256 of the canonical JSON form of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let digest = Sha256::digest(to_json_string(value).as_bytes());
    hex::encode(digest)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, task)`. Every RNG in the crate is derived this way
/// from a single experiment seed.
pub fn derive_seed(seed: u64, task: u64) -> u64 {
    splitmix64(seed ^ splitmix64(task))
}

/// Task id for a textual label, for use with [`derive_seed`].
pub fn task_id(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
