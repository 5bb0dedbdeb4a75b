//! Time-tag file formats.
//!
//! Binary layout (little-endian): 4-byte magic `QTAG`, `u16` version,
//! `u16` channel, `u64` duration in ps, `u64` tag count, then one `u64`
//! timestamp in ps per tag. One stream per file.
//!
//! CSV layout: an optional `# duration_ps=N` line, a `channel,timestamp_ps`
//! header, then one row per tag. Several channels may share a file.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::montecarlo::TagStream;

pub const MAGIC: [u8; 4] = *b"QTAG";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

pub fn write_binary<W: Write>(stream: &TagStream, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&stream.channel.to_le_bytes())?;
    w.write_all(&stream.duration_ps.to_le_bytes())?;
    w.write_all(&(stream.timestamps.len() as u64).to_le_bytes())?;
    for t in &stream.timestamps {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(input: R) -> Result<TagStream> {
    let mut r = BufReader::new(input);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated tag-file header".into()))?;
    if header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a tag file".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tag-file version {version}")));
    }
    let channel = u16::from_le_bytes([header[6], header[7]]);
    let duration_ps = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let count = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
    let mut timestamps = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut buf = [0u8; 8];
    for k in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("file ends after {k} of {count} tags")))?;
        timestamps.push(u64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after last tag".into()));
    }
    TagStream::new(channel, duration_ps, timestamps)
}

pub fn write_csv<W: Write>(streams: &[TagStream], out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    if let Some(d) = streams.iter().map(|s| s.duration_ps).max() {
        writeln!(w, "# duration_ps={d}")?;
    }
    writeln!(w, "channel,timestamp_ps")?;
    for s in streams {
        for t in &s.timestamps {
            writeln!(w, "{},{}", s.channel, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV tag file. `duration_ps` overrides the duration recorded in
/// the file and is required when the file has none.
pub fn read_csv<R: Read>(input: R, duration_ps: Option<u64>) -> Result<Vec<TagStream>> {
    let mut by_channel: BTreeMap<u16, Vec<u64>> = BTreeMap::new();
    let mut recorded = None;
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("duration_ps=") {
                let d = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad duration_ps", lineno + 1)))?;
                recorded = Some(d);
            }
            continue;
        }
        if line.is_empty() || line.starts_with("channel") {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected `channel,timestamp_ps`", lineno + 1));
        let (c, t) = line.split_once(',').ok_or_else(bad)?;
        let c: u16 = c.trim().parse().map_err(|_| bad())?;
        let t: u64 = t.trim().parse().map_err(|_| bad())?;
        by_channel.entry(c).or_default().push(t);
    }
    let duration_ps = duration_ps
        .or(recorded)
        .ok_or_else(|| Error::Format("CSV has no duration_ps line; pass a duration".into()))?;
    by_channel
        .into_iter()
        .map(|(c, mut ts)| {
            ts.sort_unstable();
            TagStream::new(c, duration_ps, ts)
        })
        .collect()
}

pub fn save_binary(stream: &TagStream, path: &Path) -> Result<()> {
    write_binary(stream, std::fs::File::create(path)?)
}

pub fn load_binary(path: &Path) -> Result<TagStream> {
    read_binary(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TagStream {
        TagStream::new(2, 1_000_000, vec![0, 5, 5, 999, 123_456]).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let mut bytes = Vec::new();
        write_binary(&sample(), &mut bytes).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 5);
        assert_eq!(read_binary(bytes.as_slice()).unwrap(), sample());
    }

    #[test]
    fn binary_rejects_corruption() {
        let mut bytes = Vec::new();
        write_binary(&sample(), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_binary(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_binary(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_binary(long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip_multi_channel() {
        let a = sample();
        let b = TagStream::new(0, 1_000_000, vec![7, 8]).unwrap();
        let mut bytes = Vec::new();
        write_csv(&[a.clone(), b.clone()], &mut bytes).unwrap();
        let back = read_csv(bytes.as_slice(), None).unwrap();
        assert_eq!(back, vec![b, a]);
    }

    #[test]
    fn csv_reports_bad_rows() {
        let text = "channel,timestamp_ps\n0,12\nzero,3\n";
        assert!(matches!(read_csv(text.as_bytes(), Some(100)), Err(Error::Format(_))));
        let text = "channel,timestamp_ps\n0,12\n";
        assert!(matches!(read_csv(text.as_bytes(), None), Err(Error::Format(_))));
        assert_eq!(read_csv(text.as_bytes(), Some(20)).unwrap()[0].timestamps, vec![12]);
    }
}
