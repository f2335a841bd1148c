//! Binary portable pixmap IO: P6 for RGB frames, P5 for binary masks.

use super::video::{Frame, MaskFrame};
use crate::error::{Error, Result};

/// Serialize an RGB frame as a binary P6 pixmap.
pub fn write_p6(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.rgb);
    out
}

/// Serialize a binary mask as a P5 graymap (values 0 or 255).
pub fn write_p5(mask: &MaskFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.values);
    out
}

struct Header {
    width: usize,
    height: usize,
    payload_at: usize,
}

fn parse_header(bytes: &[u8], magic: &str) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::MalformedHeader(format!(
            "expected {magic} pixmap magic"
        )));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace between tokens
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!(
                "{magic} header field is not a number"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("bad {magic} header field")))?;
    }
    if fields[2] != 255 {
        return Err(Error::MalformedHeader(format!(
            "{magic} maxval must be 255, got {}",
            fields[2]
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader(format!(
            "{magic} header not terminated by whitespace"
        )));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload_at: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, want: usize, what: &str) -> Result<&'a [u8]> {
    let body = &bytes[header.payload_at..];
    if body.len() < want {
        return Err(Error::Truncated(format!(
            "{what} payload wants {want} bytes, got {}",
            body.len()
        )));
    }
    if body.len() > want {
        return Err(Error::Parse(format!(
            "{what} carries {} trailing bytes",
            body.len() - want
        )));
    }
    Ok(body)
}

/// Parse a binary P6 pixmap.
pub fn read_p6(bytes: &[u8]) -> Result<Frame> {
    let header = parse_header(bytes, "P6")?;
    let want = header.width * header.height * 3;
    let body = payload(bytes, &header, want, "P6")?;
    Ok(Frame {
        width: header.width,
        height: header.height,
        rgb: body.to_vec(),
    })
}

/// Parse a binary P5 graymap holding a {0, 255} mask.
pub fn read_p5(bytes: &[u8]) -> Result<MaskFrame> {
    let header = parse_header(bytes, "P5")?;
    let want = header.width * header.height;
    let body = payload(bytes, &header, want, "P5")?;
    if body.iter().any(|&v| v != 0 && v != 255) {
        return Err(Error::Parse("mask graymap carries non-binary values".into()));
    }
    Ok(MaskFrame {
        width: header.width,
        height: header.height,
        values: body.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_header_arithmetic() {
        let frame = Frame {
            width: 64,
            height: 64,
            rgb: vec![7u8; 64 * 64 * 3],
        };
        let bytes = write_p6(&frame);
        assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(bytes.len(), b"P6\n64 64\n255\n".len() + 12288);
    }

    #[test]
    fn p6_roundtrip_is_byte_exact() {
        let frame = Frame {
            width: 3,
            height: 2,
            rgb: (0..18).collect(),
        };
        let bytes = write_p6(&frame);
        assert_eq!(read_p6(&bytes).unwrap(), frame);
    }

    #[test]
    fn p5_roundtrip_and_binary_validation() {
        let mask = MaskFrame {
            width: 2,
            height: 2,
            values: vec![0, 255, 255, 0],
        };
        let bytes = write_p5(&mask);
        assert_eq!(read_p5(&bytes).unwrap(), mask);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] = 17;
        assert!(matches!(read_p5(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let frame = Frame {
            width: 4,
            height: 4,
            rgb: vec![1u8; 48],
        };
        let mut bytes = write_p6(&frame);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(read_p6(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn wrong_magic_is_malformed_header() {
        assert!(matches!(
            read_p6(b"P5\n1 1\n255\nx"),
            Err(Error::MalformedHeader(_))
        ));
    }
}
