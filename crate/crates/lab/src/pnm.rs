//! Binary PPM (P6) and PGM (P5) codecs, 8-bit only.

use seqens_core::{LabelMap, Tensor};

use crate::error::FormatError;

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError { offset, message: message.into() })
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, FormatError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.bytes.get(self.pos) {
                None => err(start, format!("truncated header, expected {}", what)),
                Some(_) => err(start, format!("expected {}", what)),
            };
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().or_else(|_| err(start, format!("{} out of range", what)))
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, FormatError> {
    if bytes.len() < 2 {
        return err(0, "truncated magic number");
    }
    if &bytes[..2] != magic {
        return err(0, format!("bad magic {:?}, expected {}", String::from_utf8_lossy(&bytes[..2]), String::from_utf8_lossy(magic)));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space_and_comments();
    let max_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return err(max_at, format!("maxval {} unsupported, expected 255", maxval));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        Some(_) => return err(c.pos, "expected whitespace after maxval"),
        None => return err(c.pos, "truncated header"),
    }
    if width == 0 || height == 0 {
        return err(2, format!("empty image {}x{}", width, height));
    }
    Ok(Header { width, height, payload: c.pos })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8], FormatError> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.payload;
    if have < need {
        return err(bytes.len(), format!("truncated payload: {} of {} bytes", have, need));
    }
    if have > need {
        return err(h.payload + need, format!("{} trailing bytes", have - need));
    }
    Ok(&bytes[h.payload..])
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "encode_ppm expects [3, H, W], got {:?}", s);
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let d = image.data();
    out.reserve(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push(quantize(d[c * hw + p]));
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let h = parse_header(bytes, b"P6")?;
    let px = payload(bytes, &h, 3)?;
    let hw = h.width * h.height;
    let mut data = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = px[3 * p + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h.height, h.width], data).expect("sized"))
}

/// Encodes `values` (row-major `height × width`) as a P5 graymap.
pub fn encode_pgm_raw(height: usize, width: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(values);
    out
}

/// Label maps store the class id as the gray value.
pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    encode_pgm_raw(label.height(), label.width(), label.data())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap, FormatError> {
    let h = parse_header(bytes, b"P5")?;
    let px = payload(bytes, &h, 1)?;
    Ok(LabelMap::new(h.height, h.width, px.to_vec()).expect("sized"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded_ppm() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[..4], [1.0, 0.0, 0.0, 0.2]);
        assert_eq!(t.data()[4..8], [0.0, 1.0, 0.0, 0.4]);
        assert_eq!(t.data()[8..], [0.0, 0.0, 1.0, 0.6]);
        assert_eq!(encode_ppm(&t)[encode_ppm(&t).len() - 12..], bytes[bytes.len() - 12..]);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(decode_ppm(b"P3\n1 1\n255\n\0\0\0").unwrap_err().offset, 0);
        let e = decode_pgm(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert_eq!(e.offset, 7);
        assert!(e.message.contains("maxval"));
        let e = decode_pgm(b"P5\n2 2\n255\n\x01\x02").unwrap_err();
        assert_eq!(e.offset, 13);
        assert!(e.message.contains("truncated"));
        assert!(decode_pgm(b"P5\n2 x\n255\n").unwrap_err().message.contains("height"));
        assert!(decode_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn label_round_trip() {
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 255, 7]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&l)).unwrap(), l);
    }
}
