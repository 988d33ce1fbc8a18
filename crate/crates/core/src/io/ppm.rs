//! Binary PPM (P6, maxval 255). Files hold interleaved RGB; [`Image`] is planar.

use std::fs;
use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: usize) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::format(start, "expected a decimal number in PPM header"));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let value = text
        .parse()
        .map_err(|_| Error::format(start, format!("header number {text} out of range")))?;
    Ok((value, end))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "not a binary PPM (magic must be P6)"));
    }
    let (width, pos) = header_number(bytes, 2)?;
    let (height, pos) = header_number(bytes, pos)?;
    let (maxval, pos) = header_number(bytes, pos)?;
    if maxval != 255 {
        return Err(Error::format(pos, format!("maxval {maxval} unsupported (need 255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(pos, "missing whitespace after maxval"));
    }
    let body = &bytes[pos + 1..];
    let expected = 3 * width * height;
    if body.len() != expected {
        return Err(Error::format(
            pos + 1 + body.len().min(expected),
            format!("pixel data has {} bytes, expected {expected}", body.len()),
        ));
    }
    let p = width * height;
    let mut data = vec![0u8; expected];
    for (i, rgb) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * p + i] = rgb[c];
        }
    }
    Image::new(3, height, width, data)
}

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::dim(format!("PPM needs 3 channels, image has {}", image.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    let p = image.pixels();
    out.reserve(3 * p);
    for i in 0..p {
        for c in 0..3 {
            out.push(image.data[c * p + i]);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let im = decode_ppm(bytes).unwrap();
        assert_eq!(im.data, vec![255, 255, 255]);
        assert_eq!(encode_ppm(&im).unwrap(), bytes.to_vec());
    }

    #[test]
    fn cifar_sized_header() {
        let mut bytes = b"P6\n32 32\n255\n".to_vec();
        bytes.extend(std::iter::repeat(7u8).take(3072));
        let im = decode_ppm(&bytes).unwrap();
        assert_eq!((im.channels, im.height, im.width), (3, 32, 32));
    }

    #[test]
    fn rejects_other_magic_and_maxval() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n000"), Err(Error::Format { .. })));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format { .. })));
        assert!(matches!(decode_ppm(b"P6\n2 1\n255\n\0\0\0"), Err(Error::Format { .. })));
    }

    #[test]
    fn comments_are_skipped() {
        let im = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(im.data, vec![1, 2, 3]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(data in proptest::collection::vec(any::<u8>(), 3 * 32 * 32)) {
            let im = Image::new(3, 32, 32, data).unwrap();
            let bytes = encode_ppm(&im).unwrap();
            let back = decode_ppm(&bytes).unwrap();
            prop_assert_eq!(&back, &im);
            prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
        }
    }
}
