//! Shared helpers for the `SF??` binary dump formats: a `|`-separated ASCII
//! header terminated by `\n`, followed by little-endian `f32` payload.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};

/// Upper bound on header length; anything longer is treated as corrupt.
const MAX_HEADER: usize = 4096;

pub fn write_header<W: Write>(w: &mut W, fields: &[String]) -> std::io::Result<()> {
    w.write_all(fields.join("|").as_bytes())?;
    w.write_all(b"\n")
}

/// Reads one header line and checks its magic tag and field count.
pub fn read_header<R: BufRead>(
    r: &mut R,
    magic: &str,
    n_fields: usize,
    context: &str,
) -> Result<Vec<String>> {
    let mut line = Vec::new();
    let n = r
        .take(MAX_HEADER as u64)
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::header(context, e.to_string()))?;
    if n == 0 {
        return Err(Error::header(context, "empty stream"));
    }
    if line.last() != Some(&b'\n') {
        return Err(Error::header(context, "unterminated header"));
    }
    line.pop();
    let text = String::from_utf8(line).map_err(|_| Error::header(context, "non-UTF-8 header"))?;
    let fields: Vec<String> = text.split('|').map(str::to_owned).collect();
    if fields[0] != magic {
        return Err(Error::header(
            context,
            format!("expected magic {magic}, found {}", fields[0]),
        ));
    }
    if fields.len() != n_fields {
        return Err(Error::header(
            context,
            format!("expected {n_fields} fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

pub fn parse_field<T: std::str::FromStr>(fields: &[String], idx: usize, context: &str) -> Result<T> {
    fields[idx]
        .parse()
        .map_err(|_| Error::header(context, format!("bad field {idx}: `{}`", fields[idx])))
}

pub fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, count: usize, context: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::header(context, format!("payload shorter than {count} floats")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f64s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, count: usize, context: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::header(context, format!("payload shorter than {count} doubles")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Fails if any bytes remain in the stream.
pub fn expect_eof<R: Read>(r: &mut R, context: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::header(context, "trailing bytes after payload")),
        Err(e) => Err(Error::header(context, e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn header_roundtrip_and_magic_check() {
        let mut buf = Vec::new();
        write_header(&mut buf, &["SFW1".into(), "4".into(), "3".into(), "2".into()]).unwrap();
        write_f32s(&mut buf, [1.5f32, -2.0]).unwrap();
        let mut cur = Cursor::new(&buf);
        let f = read_header(&mut cur, "SFW1", 4, "t").unwrap();
        assert_eq!(parse_field::<usize>(&f, 1, "t").unwrap(), 4);
        assert_eq!(read_f32s(&mut cur, 2, "t").unwrap(), vec![1.5, -2.0]);
        expect_eof(&mut cur, "t").unwrap();

        let mut cur = Cursor::new(&buf);
        assert!(read_header(&mut cur, "SFM1", 4, "t").is_err());
    }
}
