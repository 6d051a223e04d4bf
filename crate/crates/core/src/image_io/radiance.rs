//! Radiance `.hdr` (RGBE) reader and writer with run-length encoded scanlines.

use std::path::Path;

use super::HdrImage;
use crate::error::{Error, Result};

const MAX_DIM: usize = 1 << 16;
const MAX_HEADER: usize = 1 << 16;

/// Shared-exponent decode: `value = mantissa * 2^(exponent - 136)`.
pub fn rgbe_to_rgb(p: [u8; 4]) -> [f32; 3] {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = ((p[3] as i32) - 136) as f64;
    let scale = f.exp2() as f32;
    [p[0] as f32 * scale, p[1] as f32 * scale, p[2] as f32 * scale]
}

/// Shared-exponent encode with rounded mantissas, so the decoded value of the
/// largest channel is within `max / 256` of the input.
pub fn rgb_to_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let v = rgb[0].max(rgb[1]).max(rgb[2]) as f64;
    if !(v >= 1e-32) {
        return [0; 4];
    }
    // v in [2^(e-1), 2^e)
    let mut e = v.log2().floor() as i32 + 1;
    while v >= (e as f64).exp2() {
        e += 1;
    }
    while v < ((e - 1) as f64).exp2() {
        e -= 1;
    }
    let quant = |e: i32| {
        let scale = 256.0 / (e as f64).exp2();
        rgb.map(|c| (c as f64 * scale).round())
    };
    let mut m = quant(e);
    if m.iter().any(|&x| x > 255.0) {
        e += 1;
        m = quant(e);
    }
    if e + 128 > 255 {
        return [255, 255, 255, 255];
    }
    if e + 128 < 1 {
        return [0; 4];
    }
    [m[0] as u8, m[1] as u8, m[2] as u8, (e + 128) as u8]
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn byte(&mut self, row: usize) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or(Error::TruncatedScanline { row })?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize, row: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::TruncatedScanline { row })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let len = rest
            .iter()
            .take(MAX_HEADER)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("unterminated header line".into()))?;
        self.pos += len + 1;
        std::str::from_utf8(&rest[..len]).map_err(|_| Error::MalformedHeader("header is not text".into()))
    }
}

fn parse_header(c: &mut Cursor<'_>) -> Result<(usize, usize)> {
    let magic = c.line()?;
    if magic != "#?RADIANCE" && magic != "#?RGBE" {
        return Err(Error::MalformedHeader(format!("bad signature {magic:?}")));
    }
    loop {
        if c.pos > MAX_HEADER {
            return Err(Error::MalformedHeader("header too long".into()));
        }
        let line = c.line()?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(Error::MalformedHeader(format!("unsupported format {fmt:?}")));
            }
        }
    }
    let res = c.line()?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let [ya, h, xa, w] = parts.as_slice() else {
        return Err(Error::MalformedHeader(format!("bad resolution line {res:?}")));
    };
    if *ya != "-Y" || *xa != "+X" {
        return Err(Error::MalformedHeader(format!("unsupported orientation {res:?}")));
    }
    let dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&d| (1..=MAX_DIM).contains(&d))
            .ok_or_else(|| Error::MalformedHeader(format!("bad dimension {s:?}")))
    };
    Ok((dim(w)?, dim(h)?))
}

fn read_scanline(
    c: &mut Cursor<'_>,
    width: usize,
    row: usize,
    prev_row_end: Option<[u8; 4]>,
    out: &mut Vec<[u8; 4]>,
) -> Result<()> {
    let start = out.len();
    if (8..=0x7fff).contains(&width) {
        let head = c.take(4, row)?;
        if head[0] == 2 && head[1] == 2 && head[2] & 0x80 == 0 {
            let len = ((head[2] as usize) << 8) | head[3] as usize;
            if len != width {
                return Err(Error::CorruptScanline {
                    row,
                    reason: "scanline length disagrees with image width",
                });
            }
            let mut planes = vec![0u8; 4 * width];
            for ch in 0..4 {
                let plane = &mut planes[ch * width..(ch + 1) * width];
                let mut x = 0;
                while x < width {
                    let count = c.byte(row)? as usize;
                    if count > 128 {
                        let run = count - 128;
                        if x + run > width {
                            return Err(Error::CorruptScanline {
                                row,
                                reason: "run overflows scanline",
                            });
                        }
                        let v = c.byte(row)?;
                        plane[x..x + run].fill(v);
                        x += run;
                    } else {
                        if count == 0 || x + count > width {
                            return Err(Error::CorruptScanline {
                                row,
                                reason: "bad literal count",
                            });
                        }
                        plane[x..x + count].copy_from_slice(c.take(count, row)?);
                        x += count;
                    }
                }
            }
            out.extend((0..width).map(|x| {
                [
                    planes[x],
                    planes[width + x],
                    planes[2 * width + x],
                    planes[3 * width + x],
                ]
            }));
            return Ok(());
        }
        c.pos -= 4;
    }
    // flat pixels, possibly with old-style (1,1,1,n) repeats
    let mut shift = 0u32;
    let mut prev = prev_row_end;
    while out.len() - start < width {
        let p = c.take(4, row)?;
        let p = [p[0], p[1], p[2], p[3]];
        if p[0] == 1 && p[1] == 1 && p[2] == 1 {
            let Some(last) = prev else {
                return Err(Error::CorruptScanline {
                    row,
                    reason: "repeat with no previous pixel",
                });
            };
            let n = (p[3] as usize).checked_shl(shift).unwrap_or(usize::MAX);
            if shift > 24 || out.len() - start + n > width {
                return Err(Error::CorruptScanline {
                    row,
                    reason: "repeat overflows scanline",
                });
            }
            out.extend(std::iter::repeat_n(last, n));
            shift += 8;
        } else {
            out.push(p);
            prev = Some(p);
            shift = 0;
        }
    }
    Ok(())
}

/// Decode a Radiance file held in memory.
pub fn decode_radiance(bytes: &[u8]) -> Result<HdrImage> {
    let mut c = Cursor { bytes, pos: 0 };
    let (width, height) = parse_header(&mut c)?;
    // grow with the decoded data rather than trusting header dimensions
    let mut pixels: Vec<[u8; 4]> = Vec::with_capacity(width.min(4096));
    for row in 0..height {
        let prev = pixels.last().copied();
        read_scanline(&mut c, width, row, prev, &mut pixels)?;
    }
    let mut data = Vec::with_capacity(width * height * 3);
    for p in pixels {
        data.extend_from_slice(&rgbe_to_rgb(p));
    }
    HdrImage::new(width, height, data)
}

pub fn read_radiance_hdr(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut img = decode_radiance(&bytes)?;
    img.source_path = Some(path.display().to_string());
    Ok(img)
}

fn rle_plane(data: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let n = data.len();
    let mut cur = 0;
    while cur < n {
        let mut beg = cur;
        let mut run = 0;
        let mut old_run = 0;
        while run < MIN_RUN && beg < n {
            beg += run;
            old_run = run;
            run = 1;
            while beg + run < n && run < 127 && data[beg] == data[beg + run] {
                run += 1;
            }
        }
        if old_run > 1 && old_run == beg - cur {
            out.push((128 + old_run) as u8);
            out.push(data[cur]);
            cur = beg;
        }
        while cur < beg {
            let lit = (beg - cur).min(128);
            out.push(lit as u8);
            out.extend_from_slice(&data[cur..cur + lit]);
            cur += lit;
        }
        if run >= MIN_RUN {
            out.push((128 + run) as u8);
            out.push(data[beg]);
            cur += run;
        }
    }
}

/// Encode with new-style run-length scanlines where the width allows it.
pub fn encode_radiance(img: &HdrImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::new();
    out.extend_from_slice(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n");
    out.extend_from_slice(format!("-Y {h} +X {w}\n").as_bytes());
    let rle = (8..=0x7fff).contains(&w);
    let mut planes = vec![0u8; 4 * w];
    for y in 0..h {
        for x in 0..w {
            let p = rgb_to_rgbe(img.pixel(x, y));
            if rle {
                for ch in 0..4 {
                    planes[ch * w + x] = p[ch];
                }
            } else {
                out.extend_from_slice(&p);
            }
        }
        if rle {
            out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for ch in 0..4 {
                rle_plane(&planes[ch * w..(ch + 1) * w], &mut out);
            }
        }
    }
    out
}

pub fn write_radiance_hdr(path: impl AsRef<Path>, img: &HdrImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_radiance(img)).map_err(|e| Error::io(path, e))
}
