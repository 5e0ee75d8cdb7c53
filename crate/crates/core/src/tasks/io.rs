//! Image files: plain PPM (P3) for viewing, raw little-endian `f64` HSV
//! triples as a lossless sidecar.

use std::fs;
use std::path::Path;

use super::even_pixels::{EvenPixelsImage, Hsv, PIXELS, SIDE};
use crate::error::{Error, Result};

pub fn to_ppm(image: &EvenPixelsImage) -> String {
    let mut s = format!("P3\n{SIDE} {SIDE}\n255\n");
    for row in image.rgb8().chunks(SIDE) {
        let line: Vec<String> = row.iter().map(|[r, g, b]| format!("{r} {g} {b}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Parses a 32x32 P3 pixmap back to 8-bit RGB.
pub fn parse_ppm(text: &str) -> Result<Vec<[u8; 3]>> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    if tokens.len() < 4 || tokens[0] != "P3" {
        return Err(Error::Format("not a P3 pixmap".into()));
    }
    let num = |t: &str| t.parse::<usize>().map_err(|_| Error::Format(format!("bad number '{t}'")));
    let (w, h, max) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if w != SIDE || h != SIDE || max != 255 {
        return Err(Error::Format(format!("expected {SIDE}x{SIDE} with maxval 255")));
    }
    let values = &tokens[4..];
    if values.len() != PIXELS * 3 {
        return Err(Error::Format(format!("{} channel values, expected {}", values.len(), PIXELS * 3)));
    }
    values
        .chunks_exact(3)
        .map(|c| {
            let mut px = [0u8; 3];
            for (o, t) in px.iter_mut().zip(c) {
                *o = t.parse().map_err(|_| Error::Format(format!("bad channel '{t}'")))?;
            }
            Ok(px)
        })
        .collect()
}

pub fn to_raw(image: &EvenPixelsImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(PIXELS * 24);
    for p in image.pixels() {
        for v in [p.h, p.s, p.v] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_raw(bytes: &[u8]) -> Result<EvenPixelsImage> {
    if bytes.len() != PIXELS * 24 {
        return Err(Error::Format(format!("raw image has {} bytes, expected {}", bytes.len(), PIXELS * 24)));
    }
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
    EvenPixelsImage::new(
        bytes
            .chunks_exact(24)
            .map(|c| Hsv {
                h: f(&c[..8]),
                s: f(&c[8..16]),
                v: f(&c[16..]),
            })
            .collect(),
    )
}

/// Writes `<stem>.ppm` and `<stem>.hsv`.
pub fn save_image(image: &EvenPixelsImage, stem: &Path) -> Result<()> {
    let ppm = stem.with_extension("ppm");
    fs::write(&ppm, to_ppm(image)).map_err(|e| Error::file(&ppm, e))?;
    let raw = stem.with_extension("hsv");
    fs::write(&raw, to_raw(image)).map_err(|e| Error::file(&raw, e))
}

pub fn load_image(raw: &Path) -> Result<EvenPixelsImage> {
    from_raw(&fs::read(raw).map_err(|e| Error::file(raw, e))?)
}
